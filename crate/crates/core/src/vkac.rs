//! Visual-knowledge attention, the concat classifier and its loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{LinearMap, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Probabilities are clamped to this before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VkacParams {
    pub theta: LinearMap,
    pub phi: LinearMap,
    pub psi: LinearMap,
    pub kappa: LinearMap,
}

impl VkacParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(VkacParams {
            theta: LinearMap::new(store, &format!("{prefix}.theta"), dim, dim, rng)?,
            phi: LinearMap::new(store, &format!("{prefix}.phi"), dim, dim, rng)?,
            psi: LinearMap::new(store, &format!("{prefix}.psi"), dim, dim, rng)?,
            kappa: LinearMap::new(store, &format!("{prefix}.kappa"), dim, dim, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.in_dim
    }
}

fn check_row(tape: &Tape, op: &'static str, x: Var, dim: usize) -> Result<()> {
    if tape.shape(x) != [1, dim] {
        return Err(Error::shape(op, tape.shape(x), &[1, dim]));
    }
    Ok(())
}

fn check_cols(tape: &Tape, op: &'static str, x: Var, dim: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != dim {
        return Err(Error::shape(op, s, &[s.first().copied().unwrap_or(0), dim]));
    }
    Ok(())
}

/// Pools `h` (`N × D`) with the visual feature `f_v` (`1 × D`) as query.
pub fn vkac(tape: &mut Tape, params: &VkacParams, f_v: Var, h: Var) -> Result<Var> {
    vkac_traced(tape, params, f_v, h).map(|(out, _)| out)
}

/// Also returns the `1 × N` attention row, absent when `N = 0`.
pub fn vkac_traced(tape: &mut Tape, params: &VkacParams, f_v: Var, h: Var) -> Result<(Var, Option<Var>)> {
    let d = params.dim();
    check_row(tape, "vkac", f_v, d)?;
    check_cols(tape, "vkac", h, d)?;
    if tape.shape(h)[0] == 0 {
        return Ok((tape.constant(Tensor::zeros(&[1, d])), None));
    }
    let query = params.theta.forward(tape, f_v)?;
    let keys = params.phi.forward(tape, h)?;
    let scores = tape.matmul_bt(query, keys)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let w = tape.softmax_rows(scores)?;
    let values = params.psi.forward(tape, h)?;
    let attended = tape.matmul(w, values)?;
    let mapped = params.kappa.forward(tape, attended)?;
    Ok((tape.add(mapped, attended)?, Some(w)))
}

/// Row mean of `h`; zeros `1 × D` when `h` has no rows.
pub fn mean_pool(tape: &mut Tape, h: Var, dim: usize) -> Result<Var> {
    check_cols(tape, "mean_pool", h, dim)?;
    if tape.shape(h)[0] == 0 {
        return Ok(tape.constant(Tensor::zeros(&[1, dim])));
    }
    tape.mean_rows(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierParams {
    pub fc: LinearMap,
    pub num_classes: usize,
}

impl ClassifierParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        Ok(ClassifierParams {
            fc: LinearMap::new(store, &format!("{prefix}.fc"), 2 * dim, num_classes, rng)?,
            num_classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.fc.in_dim / 2
    }
}

/// Pre-softmax scores `fc(concat(f_v, h_out))`, `1 × M`.
pub fn classify_logits(tape: &mut Tape, params: &ClassifierParams, f_v: Var, h_out: Var) -> Result<Var> {
    let d = params.dim();
    check_row(tape, "classify", f_v, d)?;
    check_row(tape, "classify", h_out, d)?;
    let joined = tape.concat_cols(&[f_v, h_out])?;
    params.fc.forward(tape, joined)
}

/// Class probabilities `1 × M`.
pub fn classify(tape: &mut Tape, params: &ClassifierParams, f_v: Var, h_out: Var) -> Result<Var> {
    let logits = classify_logits(tape, params, f_v, h_out)?;
    tape.softmax_rows(logits)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// `-(1/M) log p_y`.
    #[default]
    Scaled,
    /// `-log p_y`.
    Standard,
}

/// Per-sample loss for probability row `p` and label `y`.
pub fn loss(tape: &mut Tape, p: Var, y: usize, form: LossForm) -> Result<Var> {
    let s = tape.shape(p);
    if s.len() != 2 || s[0] != 1 {
        return Err(Error::shape("loss", s, &[1, s.get(1).copied().unwrap_or(0)]));
    }
    let m = s[1];
    if y >= m {
        return Err(Error::Usage(format!("label {y} out of range for {m} classes")));
    }
    let py = tape.pick(p, 0, y)?;
    let log = tape.log_clamped(py, PROB_FLOOR);
    let factor = match form {
        LossForm::Scaled => -1.0 / m as f64,
        LossForm::Standard => -1.0,
    };
    Ok(tape.scale(log, factor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, relative_error};
    use crate::reference;
    use crate::rng::seeded;
    use crate::tensor::matmul;
    use proptest::prelude::*;
    use rand::Rng as _;
    use crate::rng::Rng;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    fn linear(store: &ParamStore, m: &LinearMap, x: &Tensor) -> Tensor {
        let mut y = matmul(x, store.value(m.weight)).unwrap();
        let b = store.value(m.bias).data();
        for r in 0..y.rows() {
            let cols = y.cols();
            for c in 0..cols {
                y.data_mut()[r * cols + c] += b[c];
            }
        }
        y
    }

    fn setup(dim: usize, seed: u64) -> (ParamStore, VkacParams) {
        let mut store = ParamStore::new();
        let p = VkacParams::new(&mut store, "vkac", dim, &mut seeded(seed)).unwrap();
        (store, p)
    }

    #[test]
    fn single_key_gets_full_weight() {
        let (store, p) = setup(4, 1);
        let mut rng = seeded(2);
        let h = random(1, 4, &mut rng);
        let mut tape = Tape::new(&store);
        let f = tape.constant(random(1, 4, &mut rng));
        let hv = tape.constant(h.clone());
        let (out, w) = vkac_traced(&mut tape, &p, f, hv).unwrap();
        assert_eq!(tape.value(w.unwrap()).data(), &[1.0]);
        let psi = linear(&store, &p.psi, &h);
        let expected = linear(&store, &p.kappa, &psi);
        let expected: Vec<f64> = expected.data().iter().zip(psi.data()).map(|(a, b)| a + b).collect();
        assert!(tape.value(out).max_abs_diff(&Tensor::row(expected)) < 1e-12);
    }

    #[test]
    fn empty_text_gives_zero_row() {
        let (store, p) = setup(3, 1);
        let mut tape = Tape::new(&store);
        let f = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let h = tape.constant(Tensor::zeros(&[0, 3]));
        let out = vkac(&mut tape, &p, f, h).unwrap();
        assert_eq!(tape.value(out), &Tensor::zeros(&[1, 3]));
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let (store, p) = setup(3, 1);
        let mut tape = Tape::new(&store);
        let f = tape.constant(Tensor::zeros(&[1, 4]));
        let h = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(vkac(&mut tape, &p, f, h), Err(Error::Shape { .. })));
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        for seed in 0..100 {
            let (store, p) = setup(4, seed);
            let mut rng = seeded(1000 + seed);
            let n = 1 + (seed as usize % 5);
            let (f, h) = (random(1, 4, &mut rng), random(n, 4, &mut rng));
            let mut tape = Tape::new(&store);
            let (fv, hv) = (tape.constant(f.clone()), tape.constant(h.clone()));
            let (out, w) = vkac_traced(&mut tape, &p, fv, hv).unwrap();
            let (ow, oout) = reference::vkac(&p, &store, f.data(), &reference::mat(&h));
            assert!(tape.value(w.unwrap()).max_abs_diff(&Tensor::row(ow)) < 1e-10);
            assert!(tape.value(out).max_abs_diff(&Tensor::row(oout)) < 1e-10);
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut store = ParamStore::new();
        let c = ClassifierParams::new(&mut store, "cls", 3, 4, &mut seeded(0)).unwrap();
        for id in [c.fc.weight, c.fc.bias] {
            store.get_mut(id).value.fill(0.0);
        }
        let mut tape = Tape::new(&store);
        let f = tape.constant(Tensor::row(vec![1.0, -2.0, 0.5]));
        let h = tape.constant(Tensor::row(vec![0.3, 0.1, 9.0]));
        let p = classify(&mut tape, &c, f, h).unwrap();
        assert!(tape.value(p).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn classifier_rejects_bad_dims() {
        let mut store = ParamStore::new();
        let c = ClassifierParams::new(&mut store, "cls", 3, 4, &mut seeded(0)).unwrap();
        let mut tape = Tape::new(&store);
        let f = tape.constant(Tensor::zeros(&[1, 3]));
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(classify(&mut tape, &c, f, h).is_err());
    }

    #[test]
    fn loss_values() {
        let mut tape = Tape::detached();
        let p = tape.constant(Tensor::row(vec![0.0, 1.0, 0.0, 0.0]));
        let l = loss(&mut tape, p, 1, LossForm::Scaled).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);

        let u = tape.constant(Tensor::row(vec![0.25; 4]));
        let l = loss(&mut tape, u, 3, LossForm::Scaled).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln() / 4.0).abs() < 1e-15);
        assert!((tape.value(l).data()[0] - 0.3466).abs() < 5e-5);
        let l = loss(&mut tape, u, 3, LossForm::Standard).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

        // p_y = 0 is clamped, loss finite
        let l = loss(&mut tape, p, 0, LossForm::Scaled).unwrap();
        assert!((tape.value(l).data()[0] - 1e-12f64.ln() / -4.0).abs() < 1e-12);
        assert!(loss(&mut tape, p, 4, LossForm::Scaled).is_err());
    }

    #[test]
    fn loss_gradient_wrt_logits() {
        let mut rng = seeded(5);
        for form in [LossForm::Scaled, LossForm::Standard] {
            let z = random(1, 5, &mut rng);
            let f = |z: &Tensor| {
                let mut tape = Tape::detached();
                let v = tape.constant(z.clone());
                let p = tape.softmax_rows(v).unwrap();
                let l = loss(&mut tape, p, 2, form).unwrap();
                tape.value(l).data()[0]
            };
            let numeric = finite_diff_grad(f, &z, 1e-5);
            let mut tape = Tape::detached();
            let v = tape.variable(z.clone());
            let p = tape.softmax_rows(v).unwrap();
            let l = loss(&mut tape, p, 2, form).unwrap();
            let g = tape.backward(l).unwrap();
            let err = relative_error(g.get(v).unwrap(), &numeric);
            assert!(err < 1e-4, "{form:?}: {err}");
        }
    }

    proptest! {
        #[test]
        fn attention_row_is_a_distribution(seed in 0u64..10_000, n in 1usize..8) {
            let (store, p) = setup(4, seed);
            let mut rng = seeded(seed ^ 0xabc);
            let mut tape = Tape::new(&store);
            let f = tape.constant(random(1, 4, &mut rng));
            let h = tape.constant(random(n, 4, &mut rng));
            let (out, w) = vkac_traced(&mut tape, &p, f, h).unwrap();
            let w = tape.value(w.unwrap());
            prop_assert_eq!(w.shape(), &[1, n]);
            prop_assert!(w.data().iter().all(|v| *v >= 0.0));
            prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(tape.shape(out), &[1, 4]);
        }

        #[test]
        fn classifier_output_is_a_distribution(seed in 0u64..10_000, shift in -50.0f64..50.0) {
            let mut store = ParamStore::new();
            let c = ClassifierParams::new(&mut store, "cls", 3, 5, &mut seeded(seed)).unwrap();
            let mut rng = seeded(seed + 1);
            let mut tape = Tape::new(&store);
            let f = tape.constant(random(1, 3, &mut rng));
            let h = tape.constant(random(1, 3, &mut rng));
            let logits = classify_logits(&mut tape, &c, f, h).unwrap();
            let p = tape.softmax_rows(logits).unwrap();
            let p = tape.value(p).clone();
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);

            let argmax = |xs: &[f64]| xs.iter().enumerate().fold(0, |b, (i, v)| if *v > xs[b] { i } else { b });
            let z = tape.value(logits).data().to_vec();
            prop_assert_eq!(argmax(p.data()), argmax(&z));
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let sp = crate::tensor::softmax_rows(&Tensor::row(shifted)).unwrap();
            prop_assert_eq!(argmax(sp.data()), argmax(&z));
        }

        #[test]
        fn loss_nonnegative_and_decreasing(a in 0.01f64..0.98, step in 0.001f64..0.5) {
            // raise p_y, rescale the rest proportionally
            let m = 4;
            let eval = |py: f64| {
                let rest = (1.0 - py) / (m - 1) as f64;
                let mut row = vec![rest; m];
                row[0] = py;
                let mut tape = Tape::detached();
                let p = tape.constant(Tensor::row(row));
                let l = loss(&mut tape, p, 0, LossForm::Scaled).unwrap();
                tape.value(l).data()[0]
            };
            let b = (a + step).min(1.0);
            prop_assume!(b > a);
            prop_assert!(eval(a) >= 0.0);
            prop_assert!(eval(b) < eval(a));
        }
    }
}
