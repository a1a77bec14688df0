/* tslint:disable */
/* eslint-disable */

export class AttentionView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    dense(): Float64Array;
    fused(): Float64Array;
    sparse(): Float64Array;
    /**
     * The applied `(w₁, w₂)`.
     */
    weights(): Float64Array;
    /**
     * Feature-grid side length; each map has `side × side` entries.
     */
    readonly side: number;
    readonly sparse_zero_fraction: number;
}

export class Frame {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Flat `(x, y, w, h, class)` quintuples.
     */
    boxes(): Float64Array;
    /**
     * Row-major RGBA bytes.
     */
    rgba(): Uint8Array;
    readonly height: number;
    readonly width: number;
}

/**
 * Attention of one query cell over the finest feature grid of a freshly
 * initialised model, with the fusion logits set to `(a1, a2)`. Maps are for
 * the first head.
 */
export function attention(seed: bigint, index: number, query_row: number, query_col: number, a1: number, a2: number): AttentionView;

/**
 * `[IoU, GIoU, GIoU loss, L1 distance]` for two `(x, y, w, h)` boxes.
 */
export function box_metrics(pred: Float64Array, gt: Float64Array): Float64Array;

/**
 * Frame `index` of the clip generated from `seed`.
 */
export function render_frame(seed: bigint, index: number, artifacts: boolean): Frame;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_attentionview_free: (a: number, b: number) => void;
    readonly __wbg_frame_free: (a: number, b: number) => void;
    readonly attention: (a: bigint, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly attentionview_dense: (a: number) => [number, number];
    readonly attentionview_fused: (a: number) => [number, number];
    readonly attentionview_side: (a: number) => number;
    readonly attentionview_sparse: (a: number) => [number, number];
    readonly attentionview_sparse_zero_fraction: (a: number) => number;
    readonly attentionview_weights: (a: number) => [number, number];
    readonly box_metrics: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly frame_boxes: (a: number) => [number, number];
    readonly frame_height: (a: number) => number;
    readonly frame_rgba: (a: number) => [number, number];
    readonly frame_width: (a: number) => number;
    readonly render_frame: (a: bigint, b: number, c: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
