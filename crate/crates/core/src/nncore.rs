//! Dense policy-value network: `input -> ReLU(hidden) -> {policy logits, value}`.
//!
//! Parameters live in one flat vector with a fixed layout:
//!
//! ```text
//! [hidden W | hidden b | policy W | policy b | value W | value b]
//! ```
//!
//! Every weight matrix is stored `fan_in x fan_out`, row-major, so row `i`
//! holds the outgoing weights of input unit `i`. Sharding and the wire
//! format both rely on this layout being canonical.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::real::Real;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("shape mismatch for {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetArch {
    input_dim: usize,
    hidden: usize,
    actions: usize,
}

impl NetArch {
    pub fn new(input_dim: usize, hidden: usize, actions: usize) -> Result<Self, NetError> {
        if input_dim < 1 {
            return Err(NetError::InvalidArch("input_dim must be >= 1".into()));
        }
        if hidden < 1 {
            return Err(NetError::InvalidArch("hidden must be >= 1".into()));
        }
        if actions < 2 {
            return Err(NetError::InvalidArch("actions must be >= 2".into()));
        }
        Ok(Self {
            input_dim,
            hidden,
            actions,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    pub fn layout(&self) -> ParamLayout {
        let (i, h, a) = (self.input_dim, self.hidden, self.actions);
        let hidden_w = 0..i * h;
        let hidden_b = hidden_w.end..hidden_w.end + h;
        let policy_w = hidden_b.end..hidden_b.end + h * a;
        let policy_b = policy_w.end..policy_w.end + a;
        let value_w = policy_b.end..policy_b.end + h;
        let value_b = value_w.end..value_w.end + 1;
        ParamLayout {
            hidden_w,
            hidden_b,
            policy_w,
            policy_b,
            value_w,
            value_b,
        }
    }
}

/// Closed-form parameter count: hidden layer, policy head and value head,
/// each with weights and biases.
pub fn param_count(arch: &NetArch) -> usize {
    let (i, h, a) = (arch.input_dim, arch.hidden, arch.actions);
    i * h + h + h * a + a + h + 1
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub hidden_w: Range<usize>,
    pub hidden_b: Range<usize>,
    pub policy_w: Range<usize>,
    pub policy_b: Range<usize>,
    pub value_w: Range<usize>,
    pub value_b: Range<usize>,
}

impl ParamLayout {
    pub fn bias_ranges(&self) -> [Range<usize>; 3] {
        [
            self.hidden_b.clone(),
            self.policy_b.clone(),
            self.value_b.clone(),
        ]
    }

    pub fn total(&self) -> usize {
        self.value_b.end
    }
}

fn check_finite<T: Real>(values: &[T], what: &'static str) -> Result<(), NetError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(NetError::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// Flat array of all model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T>(Vec<T>);

impl<T: Real> ParamVector<T> {
    pub fn new(arch: &NetArch, values: Vec<T>) -> Result<Self, NetError> {
        if values.len() != arch.param_count() {
            return Err(NetError::Shape {
                what: "parameter vector",
                expected: arch.param_count().to_string(),
                actual: values.len().to_string(),
            });
        }
        check_finite(&values, "parameter")?;
        Ok(Self(values))
    }

    /// Wraps a raw vector without an architecture check. Used by the
    /// optimizers, which already checked lengths against the gradient.
    pub fn from_vec(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn zeros(arch: &NetArch) -> Self {
        Self(vec![T::zero(); arch.param_count()])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.f64()).collect()
    }
}

/// Gradient with the same length and layout as [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradient<T>(Vec<T>);

impl<T: Real> NetGradient<T> {
    pub fn from_vec(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn scale(&mut self, k: T) {
        self.0.iter_mut().for_each(|g| *g = *g * k);
    }

    pub fn add_assign(&mut self, other: &NetGradient<T>) {
        debug_assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = *a + *b;
        }
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights per layer, zero biases.
/// Values are drawn in double precision and rounded, so both precisions see
/// the same initial network.
pub fn init_params<T: Real>(arch: &NetArch, seed: u64) -> ParamVector<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = arch.layout();
    let mut values = vec![T::zero(); arch.param_count()];
    let layers = [
        (layout.hidden_w.clone(), arch.input_dim),
        (layout.policy_w.clone(), arch.hidden),
        (layout.value_w.clone(), arch.hidden),
    ];
    for (range, fan_in) in layers {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut values[range] {
            *v = T::of(rng.gen_range(-bound..=bound));
        }
    }
    ParamVector(values)
}

/// Everything `backward` needs from a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    batch: usize,
    input: Vec<T>,
    hidden_pre: Vec<T>,
    hidden_act: Vec<T>,
    logits: Vec<T>,
    probs: Vec<T>,
    log_probs: Vec<T>,
    values: Vec<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `batch x actions`, row-major.
    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[T] {
        &self.log_probs
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn hidden_pre(&self) -> &[T] {
        &self.hidden_pre
    }

    pub fn hidden_act(&self) -> &[T] {
        &self.hidden_act
    }
}

fn shape_err(what: &'static str, expected: String, actual: String) -> NetError {
    NetError::Shape {
        what,
        expected,
        actual,
    }
}

/// Forward pass over `batch` observations stored row-major in `obs`.
pub fn forward<T: Real>(
    arch: &NetArch,
    params: &ParamVector<T>,
    obs: &[T],
    batch: usize,
) -> Result<ForwardTrace<T>, NetError> {
    if params.len() != arch.param_count() {
        return Err(shape_err(
            "parameters",
            arch.param_count().to_string(),
            params.len().to_string(),
        ));
    }
    if obs.len() != batch * arch.input_dim {
        return Err(shape_err(
            "observation batch",
            format!("{batch}x{} ({} values)", arch.input_dim, batch * arch.input_dim),
            format!("{} values", obs.len()),
        ));
    }
    let (inp, h, a) = (arch.input_dim, arch.hidden, arch.actions);
    let layout = arch.layout();
    let p = params.as_slice();
    let hw = &p[layout.hidden_w];
    let hb = &p[layout.hidden_b];
    let pw = &p[layout.policy_w];
    let pb = &p[layout.policy_b];
    let vw = &p[layout.value_w];
    let vb = p[layout.value_b.start];

    let mut hidden_pre = Vec::with_capacity(batch * h);
    let mut hidden_act = Vec::with_capacity(batch * h);
    let mut logits = Vec::with_capacity(batch * a);
    let mut probs = Vec::with_capacity(batch * a);
    let mut log_probs = Vec::with_capacity(batch * a);
    let mut values = Vec::with_capacity(batch);

    let mut pre = vec![T::zero(); h];
    for row in obs.chunks_exact(inp.max(1)).take(batch) {
        pre.copy_from_slice(hb);
        for (i, &x) in row.iter().enumerate() {
            // observations are mostly zero pixels
            if x == T::zero() {
                continue;
            }
            let w = &hw[i * h..(i + 1) * h];
            for (acc, &wij) in pre.iter_mut().zip(w) {
                *acc = *acc + x * wij;
            }
        }
        let act: Vec<T> = pre.iter().map(|&z| z.max(T::zero())).collect();

        let mut z = pb.to_vec();
        let mut v = vb;
        for (j, &hj) in act.iter().enumerate() {
            if hj == T::zero() {
                continue;
            }
            for (k, zk) in z.iter_mut().enumerate() {
                *zk = *zk + hj * pw[j * a + k];
            }
            v = v + hj * vw[j];
        }

        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = z.iter().map(|&zk| (zk - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        let log_sum = sum.ln();
        for (&zk, &e) in z.iter().zip(&exps) {
            probs.push(e / sum);
            log_probs.push(zk - max - log_sum);
        }

        hidden_pre.extend_from_slice(&pre);
        hidden_act.extend_from_slice(&act);
        logits.extend_from_slice(&z);
        values.push(v);
    }

    Ok(ForwardTrace {
        batch,
        input: obs.to_vec(),
        hidden_pre,
        hidden_act,
        logits,
        probs,
        log_probs,
        values,
    })
}

/// Exact gradient of the scalar whose partials with respect to the logits
/// and values are `dlogits` (`batch x actions`) and `dvalues` (`batch`).
/// Contributions are summed over the batch, not averaged.
pub fn backward<T: Real>(
    arch: &NetArch,
    params: &ParamVector<T>,
    trace: &ForwardTrace<T>,
    dlogits: &[T],
    dvalues: &[T],
) -> Result<NetGradient<T>, NetError> {
    let (inp, h, a) = (arch.input_dim, arch.hidden, arch.actions);
    let batch = trace.batch;
    if params.len() != arch.param_count() {
        return Err(shape_err(
            "parameters",
            arch.param_count().to_string(),
            params.len().to_string(),
        ));
    }
    if trace.input.len() != batch * inp || trace.hidden_pre.len() != batch * h {
        return Err(shape_err(
            "forward trace",
            format!("batch {batch} of a {inp}x{h}x{a} net"),
            format!(
                "{} inputs, {} hidden activations",
                trace.input.len(),
                trace.hidden_pre.len()
            ),
        ));
    }
    if dlogits.len() != batch * a {
        return Err(shape_err(
            "logit partials",
            format!("{batch}x{a}"),
            format!("{} values", dlogits.len()),
        ));
    }
    if dvalues.len() != batch {
        return Err(shape_err(
            "value partials",
            batch.to_string(),
            dvalues.len().to_string(),
        ));
    }

    let layout = arch.layout();
    let p = params.as_slice();
    let pw = &p[layout.policy_w.clone()];
    let vw = &p[layout.value_w.clone()];

    let mut grad = vec![T::zero(); arch.param_count()];
    let mut dpre = vec![T::zero(); h];
    for b in 0..batch {
        let x = &trace.input[b * inp..(b + 1) * inp];
        let pre = &trace.hidden_pre[b * h..(b + 1) * h];
        let act = &trace.hidden_act[b * h..(b + 1) * h];
        let dz = &dlogits[b * a..(b + 1) * a];
        let dv = dvalues[b];

        let (pw0, pb0, vw0, vb0) = (
            layout.policy_w.start,
            layout.policy_b.start,
            layout.value_w.start,
            layout.value_b.start,
        );
        for (j, &hj) in act.iter().enumerate() {
            if hj == T::zero() {
                continue;
            }
            for k in 0..a {
                grad[pw0 + j * a + k] = grad[pw0 + j * a + k] + dz[k] * hj;
            }
            grad[vw0 + j] = grad[vw0 + j] + dv * hj;
        }
        for k in 0..a {
            grad[pb0 + k] = grad[pb0 + k] + dz[k];
        }
        grad[vb0] = grad[vb0] + dv;

        for j in 0..h {
            if pre[j] <= T::zero() {
                dpre[j] = T::zero();
                continue;
            }
            let mut s = dv * vw[j];
            for k in 0..a {
                s = s + dz[k] * pw[j * a + k];
            }
            dpre[j] = s;
        }

        for j in 0..h {
            let gb = &mut grad[layout.hidden_b.start + j];
            *gb = *gb + dpre[j];
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let row = &mut grad[i * h..(i + 1) * h];
            for (g, &d) in row.iter_mut().zip(&dpre) {
                *g = *g + xi * d;
            }
        }
    }
    Ok(NetGradient(grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(i: usize, h: usize, a: usize) -> NetArch {
        NetArch::new(i, h, a).unwrap()
    }

    #[test]
    fn param_count_examples() {
        assert_eq!(arch(200, 128, 3).param_count(), 26244);
        // independent per-layer shape sum
        let shapes = [(200, 128), (1, 128), (128, 3), (1, 3), (128, 1), (1, 1)];
        assert_eq!(shapes.iter().map(|(r, c)| r * c).sum::<usize>(), 26244);
        assert_eq!(arch(1, 1, 2).param_count(), 8);
        let a16 = arch(200, 16, 3).param_count();
        let a32 = arch(200, 32, 3).param_count();
        assert_eq!(a32 - a16, 16 * (200 + 3 + 2));
    }

    #[test]
    fn param_count_affine_in_hidden() {
        for input in [1, 7, 200] {
            for actions in [2, 3, 5] {
                let base = arch(input, 1, actions).param_count();
                for h in 1..=512 {
                    let got = arch(input, h, actions).param_count();
                    assert_eq!(got, base + (h - 1) * (input + actions + 2));
                }
            }
        }
    }

    #[test]
    fn invalid_arch_rejected() {
        assert!(NetArch::new(0, 1, 2).is_err());
        assert!(NetArch::new(1, 0, 2).is_err());
        assert!(NetArch::new(1, 1, 1).is_err());
    }

    #[test]
    fn layout_covers_vector() {
        let a = arch(5, 4, 3);
        let l = a.layout();
        assert_eq!(l.hidden_w, 0..20);
        assert_eq!(l.hidden_b, 20..24);
        assert_eq!(l.policy_w, 24..36);
        assert_eq!(l.policy_b, 36..39);
        assert_eq!(l.value_w, 39..43);
        assert_eq!(l.value_b, 43..44);
        assert_eq!(l.total(), a.param_count());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = arch(200, 128, 3);
        let p1 = init_params::<f32>(&a, 7);
        let p2 = init_params::<f32>(&a, 7);
        assert_eq!(p1, p2);
        for r in a.layout().bias_ranges() {
            assert!(p1.as_slice()[r].iter().all(|&b| b == 0.0));
        }
        let bound = 1.0 / 200f32.sqrt();
        assert!(p1.as_slice()[a.layout().hidden_w]
            .iter()
            .all(|w| w.abs() <= bound));
        assert_ne!(p1, init_params::<f32>(&a, 8));
    }

    #[test]
    fn zero_params_give_uniform_policy() {
        let a = arch(6, 4, 3);
        let p = ParamVector::<f64>::zeros(&a);
        let obs = vec![0.3, -1.0, 2.0, 0.0, 1.0, 5.0];
        let t = forward(&a, &p, &obs, 1).unwrap();
        for &pr in t.probs() {
            assert!((pr - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(t.values()[0], 0.0);
    }

    #[test]
    fn equal_logits_share_mass() {
        // policy bias (1,1,1), everything else zero
        let a = arch(2, 2, 3);
        let mut v = vec![0.0f64; a.param_count()];
        for i in a.layout().policy_b {
            v[i] = 1.0;
        }
        let p = ParamVector::new(&a, v).unwrap();
        let t = forward(&a, &p, &[1.0, 1.0], 1).unwrap();
        assert_eq!(t.logits(), &[1.0, 1.0, 1.0]);
        for &pr in t.probs() {
            assert!((pr - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_shape_errors_name_shapes() {
        let a = arch(4, 3, 3);
        let p = init_params::<f64>(&a, 1);
        let err = forward(&a, &p, &[0.0; 7], 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x4"), "{msg}");
        assert!(msg.contains("7 values"), "{msg}");
        let short = ParamVector::from_vec(vec![0.0f64; 3]);
        assert!(matches!(
            forward(&a, &short, &[0.0; 4], 1),
            Err(NetError::Shape { .. })
        ));
    }

    #[test]
    fn backward_zero_partials_zero_gradient() {
        let a = arch(4, 3, 3);
        let p = init_params::<f64>(&a, 3);
        let obs = [0.5, 1.0, 0.0, -0.3, 1.0, 0.0, 1.0, 1.0];
        let t = forward(&a, &p, &obs, 2).unwrap();
        let g = backward(&a, &p, &t, &[0.0; 6], &[0.0; 2]).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_rejects_mismatched_partials() {
        let a = arch(4, 3, 3);
        let p = init_params::<f64>(&a, 3);
        let t = forward(&a, &p, &[1.0; 8], 2).unwrap();
        assert!(backward(&a, &p, &t, &[0.0; 3], &[0.0; 2]).is_err());
        assert!(backward(&a, &p, &t, &[0.0; 6], &[0.0; 1]).is_err());
    }

    #[test]
    fn param_vector_rejects_non_finite() {
        let a = arch(1, 1, 2);
        let mut v = vec![0.0f32; 8];
        v[5] = f32::NAN;
        assert_eq!(
            ParamVector::new(&a, v).unwrap_err(),
            NetError::NonFinite {
                what: "parameter",
                index: 5
            }
        );
    }
}
