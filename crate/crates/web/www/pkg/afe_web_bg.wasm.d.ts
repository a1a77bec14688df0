/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_attentionview_free: (a: number, b: number) => void;
export const __wbg_frame_free: (a: number, b: number) => void;
export const attention: (a: bigint, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const attentionview_dense: (a: number) => [number, number];
export const attentionview_fused: (a: number) => [number, number];
export const attentionview_side: (a: number) => number;
export const attentionview_sparse: (a: number) => [number, number];
export const attentionview_sparse_zero_fraction: (a: number) => number;
export const attentionview_weights: (a: number) => [number, number];
export const box_metrics: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const frame_boxes: (a: number) => [number, number];
export const frame_height: (a: number) => number;
export const frame_rgba: (a: number) => [number, number];
export const frame_width: (a: number) => number;
export const render_frame: (a: bigint, b: number, c: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
