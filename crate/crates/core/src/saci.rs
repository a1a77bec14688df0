//! Scale-aware context integration.
//!
//! Upper branch: two independent `1×1 → 3×3 dilated` paths with rates `N1` and
//! `N2`, summed. Lower branch: `1×1 → three 3×3 → 1×1`. Output is the upper
//! branch gated elementwise by `relu(lower)`. Neither branch has an internal
//! activation; the gate is the only nonlinearity.

use rand::Rng;

use crate::error::{config_err, shape_err, Result};
use crate::nn::{conv_stack, join, Conv, Params};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_N1: usize = 2;
pub const DEFAULT_N2: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SaciConfig {
    pub channels: usize,
    pub n1: usize,
    pub n2: usize,
}

impl SaciConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, n1: DEFAULT_N1, n2: DEFAULT_N2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return config_err("SACI needs at least one channel");
        }
        if self.n1 == 0 || self.n2 == 0 {
            return config_err(format!("dilation rates must be ≥ 1, got N1={} N2={}", self.n1, self.n2));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaciParams<P> {
    pub cfg: SaciConfig,
    pub upper1_proj: Conv<P>,
    pub upper1_dilated: Conv<P>,
    pub upper2_proj: Conv<P>,
    pub upper2_dilated: Conv<P>,
    pub lower_proj: Conv<P>,
    pub lower_stack: Vec<Conv<P>>,
    pub lower_out: Conv<P>,
}

impl SaciParams<Tensor> {
    pub fn new(cfg: SaciConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            cfg,
            upper1_proj: Conv::pointwise(c, c, rng),
            upper1_dilated: Conv::same3x3(c, c, cfg.n1, 1, rng),
            upper2_proj: Conv::pointwise(c, c, rng),
            upper2_dilated: Conv::same3x3(c, c, cfg.n2, 1, rng),
            lower_proj: Conv::pointwise(c, c, rng),
            lower_stack: (0..3).map(|_| Conv::same3x3(c, c, 1, 1, rng)).collect(),
            lower_out: Conv::pointwise(c, c, rng),
        })
    }
}

impl<P> Params<P> for SaciParams<P> {
    type Mapped<Q> = SaciParams<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> SaciParams<Q> {
        let p = |n: &str| join(prefix, n);
        SaciParams {
            cfg: self.cfg,
            upper1_proj: self.upper1_proj.map_named(&p("upper1_proj"), f),
            upper1_dilated: self.upper1_dilated.map_named(&p("upper1_dilated"), f),
            upper2_proj: self.upper2_proj.map_named(&p("upper2_proj"), f),
            upper2_dilated: self.upper2_dilated.map_named(&p("upper2_dilated"), f),
            lower_proj: self.lower_proj.map_named(&p("lower_proj"), f),
            lower_stack: self.lower_stack.map_named(&p("lower_stack"), f),
            lower_out: self.lower_out.map_named(&p("lower_out"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        let p = |n: &str| join(prefix, n);
        self.upper1_proj.visit_mut(&p("upper1_proj"), f);
        self.upper1_dilated.visit_mut(&p("upper1_dilated"), f);
        self.upper2_proj.visit_mut(&p("upper2_proj"), f);
        self.upper2_dilated.visit_mut(&p("upper2_dilated"), f);
        self.lower_proj.visit_mut(&p("lower_proj"), f);
        self.lower_stack.visit_mut(&p("lower_stack"), f);
        self.lower_out.visit_mut(&p("lower_out"), f);
    }
}

fn check_input(tape: &Tape, x: Var, cfg: &SaciConfig) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 3 || s[0] != cfg.channels {
        return shape_err(format!("SACI configured for {} channels, got input {s:?}", cfg.channels));
    }
    Ok(())
}

/// One dilated path of the upper branch.
pub fn dilated_path(tape: &mut Tape, x: Var, proj: &Conv<Var>, dilated: &Conv<Var>) -> Result<Var> {
    let h = proj.forward(tape, x)?;
    dilated.forward(tape, h)
}

/// `F_u`: sum of the `N1` and `N2` dilated paths.
pub fn saci_upper(tape: &mut Tape, x: Var, p: &SaciParams<Var>) -> Result<Var> {
    check_input(tape, x, &p.cfg)?;
    let a = dilated_path(tape, x, &p.upper1_proj, &p.upper1_dilated)?;
    let b = dilated_path(tape, x, &p.upper2_proj, &p.upper2_dilated)?;
    tape.add(a, b)
}

/// `F_l`: `1×1 → 3×3 → 3×3 → 3×3 → 1×1`.
pub fn saci_lower(tape: &mut Tape, x: Var, p: &SaciParams<Var>) -> Result<Var> {
    check_input(tape, x, &p.cfg)?;
    let h = p.lower_proj.forward(tape, x)?;
    let h = conv_stack(tape, &p.lower_stack, h)?;
    p.lower_out.forward(tape, h)
}

/// `F_s = F_u ⊙ relu(F_l)`.
pub fn saci_forward(tape: &mut Tape, x: Var, p: &SaciParams<Var>) -> Result<Var> {
    let upper = saci_upper(tape, x, p)?;
    let lower = saci_lower(tape, x, p)?;
    let gate = tape.relu(lower)?;
    tape.mul(upper, gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bind_frozen, randomize};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> SaciParams<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SaciParams::new(SaciConfig::new(3), &mut rng).unwrap();
        randomize(&mut p, 0.4, &mut rng);
        p
    }

    #[test]
    fn zero_n2_path_leaves_n1_path() {
        let mut p = params(1);
        p.upper2_dilated.zero();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[3, 7, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let b = bind_frozen(&p, &mut tape);
        let xv = tape.constant(x);
        let fu = saci_upper(&mut tape, xv, &b).unwrap();
        let n1 = dilated_path(&mut tape, xv, &b.upper1_proj, &b.upper1_dilated).unwrap();
        assert_eq!(tape.shape(fu), &[3, 7, 6]);
        assert_eq!(tape.value(fu), tape.value(n1));
    }

    #[test]
    fn zero_input_zero_lower() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SaciParams::new(SaciConfig::new(3), &mut rng).unwrap();
        let mut tape = Tape::new();
        let b = bind_frozen(&p, &mut tape);
        let x = tape.constant(Tensor::zeros(&[3, 5, 5]));
        let fl = saci_lower(&mut tape, x, &b).unwrap();
        assert!(tape.value(fl).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_gate_zeroes_output() {
        let mut p = params(4);
        p.lower_out.zero();
        p.lower_out.bias.data_mut().fill(-1e6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let b = bind_frozen(&p, &mut tape);
        let x = tape.constant(Tensor::uniform(&[3, 6, 6], 1.0, &mut rng));
        let fs = saci_forward(&mut tape, x, &b).unwrap();
        assert!(tape.value(fs).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gate_passes_upper_branch() {
        let mut p = params(6);
        p.lower_out.zero();
        p.lower_out.bias.data_mut().fill(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let b = bind_frozen(&p, &mut tape);
        let x = tape.constant(Tensor::uniform(&[3, 6, 6], 1.0, &mut rng));
        let fs = saci_forward(&mut tape, x, &b).unwrap();
        let fu = saci_upper(&mut tape, x, &b).unwrap();
        assert_eq!(tape.value(fs), tape.value(fu));
    }

    #[test]
    fn rejects_bad_rates_and_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SaciConfig { channels: 3, n1: 0, n2: 2 };
        assert!(SaciParams::new(cfg, &mut rng).is_err());
        let p = params(8);
        let mut tape = Tape::new();
        let b = bind_frozen(&p, &mut tape);
        let x = tape.constant(Tensor::zeros(&[4, 5, 5]));
        assert!(matches!(saci_forward(&mut tape, x, &b), Err(crate::Error::Shape(_))));
    }
}
