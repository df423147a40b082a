//! The aesthetic projection layer and value-mixed cross-attention.
//!
//! `f_a = Z(LN(upᵀ · f_t))` lifts the `N` selected aesthetic tokens to the
//! `C` content-token slots. Cross-attention then computes one attention map
//! from the content keys and applies it to two value projections:
//! `x̂ = P·V_c + λ·P·V_a`.

use crate::error::{shape_err, Error, Result};
use crate::layers::LinearVars;
use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::params::{ParamStore, Tape};
use crate::scalar::Scalar;

pub const PROJ_UP: &str = "proj.up.weight";
pub const PROJ_LN_GAMMA: &str = "proj.ln.gamma";
pub const PROJ_LN_BETA: &str = "proj.ln.beta";
pub const PROJ_ZERO_W: &str = "proj.zero.weight";
pub const PROJ_ZERO_B: &str = "proj.zero.bias";

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights<T> {
    /// `[N, C]`; applied as `upᵀ · f_t`.
    pub up: Tensor<T>,
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
    /// `[d, d]`, stored `[in, out]`.
    pub zero_w: Tensor<T>,
    pub zero_b: Tensor<T>,
}

impl<T: Scalar> ProjectionWeights<T> {
    /// Fresh weights: normal `up`, identity LayerNorm affine, zero connector.
    pub fn init(n: usize, c: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            up: rng.normal_scaled(&[n, c], (1.0 / n as f64).sqrt()),
            ln_gamma: Tensor::ones(&[d]),
            ln_beta: Tensor::zeros(&[d]),
            zero_w: Tensor::zeros(&[d, d]),
            zero_b: Tensor::zeros(&[d]),
        }
    }

    pub fn insert_into(self, store: &mut ParamStore<T>) -> Result<()> {
        store.insert(PROJ_UP, self.up)?;
        store.insert(PROJ_LN_GAMMA, self.ln_gamma)?;
        store.insert(PROJ_LN_BETA, self.ln_beta)?;
        store.insert(PROJ_ZERO_W, self.zero_w)?;
        store.insert(PROJ_ZERO_B, self.zero_b)
    }

    pub fn from_store(store: &ParamStore<T>) -> Result<Self> {
        Ok(Self {
            up: store.require(PROJ_UP)?.clone(),
            ln_gamma: store.require(PROJ_LN_GAMMA)?.clone(),
            ln_beta: store.require(PROJ_LN_BETA)?.clone(),
            zero_w: store.require(PROJ_ZERO_W)?.clone(),
            zero_b: store.require(PROJ_ZERO_B)?.clone(),
        })
    }

    fn check(&self) -> Result<(usize, usize, usize)> {
        let (n, c) = self.up.dims2()?;
        let (d, d2) = self.zero_w.dims2()?;
        if d != d2 || self.ln_gamma.shape() != [d] || self.ln_beta.shape() != [d] || self.zero_b.shape() != [d] {
            return shape_err("inconsistent projection weight shapes");
        }
        Ok((n, c, d))
    }
}

/// Projection layer on a tape bound to a store holding the `proj.*` weights.
pub fn project_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, f_t: Var) -> Result<Var> {
    let up = tape.param(PROJ_UP)?;
    let gamma = tape.param(PROJ_LN_GAMMA)?;
    let beta = tape.param(PROJ_LN_BETA)?;
    let zw = tape.param(PROJ_ZERO_W)?;
    let zb = tape.param(PROJ_ZERO_B)?;
    project_graph(&mut tape.g, f_t, up, gamma, beta, zw, zb)
}

fn project_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    f_t: Var,
    up: Var,
    gamma: Var,
    beta: Var,
    zw: Var,
    zb: Var,
) -> Result<Var> {
    let (n, _) = g.value(up).dims2()?;
    if g.shape(f_t)[0] != n {
        return shape_err(format!(
            "f_t {:?} does not match {n} label pairs",
            g.shape(f_t)
        ));
    }
    let lifted = g.matmul_ex(up, true, f_t, false)?;
    let normed = g.layer_norm(lifted, gamma, beta, T::of(LN_EPS))?;
    LinearVars::plain(zw, Some(zb)).forward(g, normed)
}

/// `f_a [C, d]` from `f_t [N, d]`.
pub fn project_aesthetic<T: Scalar>(f_t: &Tensor<T>, w: &ProjectionWeights<T>) -> Result<Tensor<T>> {
    let (n, _, d) = w.check()?;
    f_t.expect_shape(&[n, d], "f_t")?;
    let mut g = Graph::inference();
    let x = g.constant_ref(f_t);
    let up = g.constant_ref(&w.up);
    let gamma = g.constant_ref(&w.ln_gamma);
    let beta = g.constant_ref(&w.ln_beta);
    let zw = g.constant_ref(&w.zero_w);
    let zb = g.constant_ref(&w.zero_b);
    let out = project_graph(&mut g, x, up, gamma, beta, zw, zb)?;
    Ok(g.value(out).clone())
}

/// Cross-attention projections. `w_va` is absent on a base model.
#[derive(Clone, Debug, PartialEq)]
pub struct VMixAttentionWeights<T> {
    /// `[d_model, H·d_head]`
    pub w_q: Tensor<T>,
    /// `[d, H·d_head]`
    pub w_kc: Tensor<T>,
    pub w_vc: Tensor<T>,
    pub w_va: Option<Tensor<T>>,
    pub heads: usize,
}

/// Graph handles for one cross-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnVars<T> {
    pub q: LinearVars<T>,
    pub kc: LinearVars<T>,
    pub vc: LinearVars<T>,
    pub va: Option<Var>,
    pub heads: usize,
}

/// Result of one value-mixed cross-attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct MixedAttention {
    /// `x̂ [L, H·d_head]`, before the output projection.
    pub out: Var,
    /// `P·V_c`
    pub content: Var,
    /// `P·V_a`, when an aesthetic branch ran.
    pub aesthetic: Option<Var>,
    /// Probabilities consumed by the content branch, `[H, L, C]`.
    pub content_probs: Var,
    /// Probabilities consumed by the aesthetic branch.
    pub aesthetic_probs: Option<Var>,
}

/// `x [L, d_model]` attends to `f_c [C, d]`. With `f_a` and a `w_va`
/// present, the same probabilities also weight `f_a·W_va`.
pub fn mixed_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    f_c: Var,
    f_a: Option<Var>,
    lambda: T,
    w: &CrossAttnVars<T>,
) -> Result<MixedAttention> {
    if !(lambda >= T::zero()) {
        return Err(Error::Range(format!("lambda must be non-negative, got {lambda}")));
    }
    let q = w.q.forward(g, x)?;
    let k = w.kc.forward(g, f_c)?;
    let v = w.vc.forward(g, f_c)?;
    let probs = g.attn_probs(q, k, w.heads)?;
    let content = g.attn_apply(probs, v)?;
    let (Some(f_a), Some(w_va)) = (f_a, w.va) else {
        return Ok(MixedAttention {
            out: content,
            content,
            aesthetic: None,
            content_probs: probs,
            aesthetic_probs: None,
        });
    };
    if g.shape(f_a) != g.shape(f_c) {
        return shape_err(format!(
            "f_a {:?} must match f_c {:?}",
            g.shape(f_a),
            g.shape(f_c)
        ));
    }
    let va = g.matmul(f_a, w_va)?;
    let aesthetic = g.attn_apply(probs, va)?;
    let out = g.axpy(content, aesthetic, lambda)?;
    Ok(MixedAttention {
        out,
        content,
        aesthetic: Some(aesthetic),
        content_probs: probs,
        aesthetic_probs: Some(probs),
    })
}

fn bind<'a, T: Scalar>(g: &mut Graph<'a, T>, w: &'a VMixAttentionWeights<T>) -> CrossAttnVars<T> {
    CrossAttnVars {
        q: LinearVars::plain(g.constant_ref(&w.w_q), None),
        kc: LinearVars::plain(g.constant_ref(&w.w_kc), None),
        vc: LinearVars::plain(g.constant_ref(&w.w_vc), None),
        va: w.w_va.as_ref().map(|t| g.constant_ref(t)),
        heads: w.heads,
    }
}

/// Content-only cross-attention: `(P·V_c, P)` with `P [H, L, C]`.
pub fn content_attention<T: Scalar>(
    x: &Tensor<T>,
    f_c: &Tensor<T>,
    w: &VMixAttentionWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::inference();
    let vars = CrossAttnVars { va: None, ..bind(&mut g, w) };
    let (xv, fv) = (g.constant_ref(x), g.constant_ref(f_c));
    let m = mixed_attention(&mut g, xv, fv, None, T::one(), &vars)?;
    Ok((g.value(m.out).clone(), g.value(m.content_probs).clone()))
}

/// `x̂ = P·V_c + λ·P·V_a` with `P` computed once from `(x, f_c)`.
pub fn value_mixed_attention<T: Scalar>(
    x: &Tensor<T>,
    f_c: &Tensor<T>,
    f_a: &Tensor<T>,
    lambda: T,
    w: &VMixAttentionWeights<T>,
) -> Result<Tensor<T>> {
    if w.w_va.is_none() {
        return Err(Error::Config("value-mixed attention needs w_va".into()));
    }
    let mut g = Graph::inference();
    let vars = bind(&mut g, w);
    let (xv, fv, av) = (g.constant_ref(x), g.constant_ref(f_c), g.constant_ref(f_a));
    let m = mixed_attention(&mut g, xv, fv, Some(av), lambda, &vars)?;
    Ok(g.value(m.out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(dm: usize, d: usize, heads: usize, seed: u64) -> VMixAttentionWeights<f64> {
        let mut rng = Rng::new(seed);
        VMixAttentionWeights {
            w_q: rng.normal_scaled(&[dm, dm], 0.4),
            w_kc: rng.normal_scaled(&[d, dm], 0.4),
            w_vc: rng.normal_scaled(&[d, dm], 0.4),
            w_va: Some(rng.normal_scaled(&[d, dm], 0.4)),
            heads,
        }
    }

    /// Unvectorized multi-head attention.
    fn naive(x: &Tensor<f64>, f: &Tensor<f64>, wq: &Tensor<f64>, wk: &Tensor<f64>, wv: &Tensor<f64>, heads: usize) -> Vec<f64> {
        let (l, dm) = x.dims2().unwrap();
        let (c, d) = f.dims2().unwrap();
        let inner = wq.shape()[1];
        let dh = inner / heads;
        let lin = |a: &Tensor<f64>, rows: usize, cols_in: usize, w: &Tensor<f64>| {
            let mut out = vec![0.0; rows * inner];
            for r in 0..rows {
                for j in 0..inner {
                    for i in 0..cols_in {
                        out[r * inner + j] += a.data()[r * cols_in + i] * w.data()[i * inner + j];
                    }
                }
            }
            out
        };
        let q = lin(x, l, dm, wq);
        let k = lin(f, c, d, wk);
        let v = lin(f, c, d, wv);
        let mut out = vec![0.0; l * inner];
        for h in 0..heads {
            for i in 0..l {
                let logits: Vec<f64> = (0..c)
                    .map(|j| (0..dh).map(|e| q[i * inner + h * dh + e] * k[j * inner + h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|t| (t - m).exp()).sum();
                for j in 0..c {
                    let p = (logits[j] - m).exp() / z;
                    for e in 0..dh {
                        out[i * inner + h * dh + e] += p * v[j * inner + h * dh + e];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn fresh_projection_is_zero() {
        let mut rng = Rng::new(1);
        let w = ProjectionWeights::<f32>::init(4, 16, 64, &mut rng);
        let f_t = rng.normal_tensor(&[4, 64]);
        let f_a = project_aesthetic(&f_t, &w).unwrap();
        assert_eq!(f_a.shape(), &[16, 64]);
        assert!(f_a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_input_gives_connector_of_beta() {
        let mut rng = Rng::new(2);
        let (n, c, d) = (3, 5, 6);
        let mut w = ProjectionWeights::<f64>::init(n, c, d, &mut rng);
        w.ln_beta = rng.normal_tensor(&[d]);
        w.ln_gamma = rng.normal_tensor(&[d]);
        w.zero_w = rng.normal_tensor(&[d, d]);
        w.zero_b = rng.normal_tensor(&[d]);
        let f_a = project_aesthetic(&Tensor::zeros(&[n, d]), &w).unwrap();
        // LN of an all-zero row is beta; the connector then maps beta.
        for r in 0..c {
            for j in 0..d {
                let expect: f64 = w.zero_b[j] + (0..d).map(|i| w.ln_beta[i] * w.zero_w[i * d + j]).sum::<f64>();
                assert!((f_a.row(r)[j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perturbing_one_token_changes_output() {
        let mut rng = Rng::new(3);
        let mut w = ProjectionWeights::<f64>::init(4, 8, 6, &mut rng);
        w.zero_w = rng.normal_tensor(&[6, 6]);
        let f_t: Tensor<f64> = rng.normal_tensor(&[4, 6]);
        let mut f_t2 = f_t.clone();
        f_t2.data_mut()[13] += 0.5;
        let a = project_aesthetic(&f_t, &w).unwrap();
        let b = project_aesthetic(&f_t2, &w).unwrap();
        // every token slot sees pair 2 through `up`
        for r in 0..8 {
            assert!(a.row(r) != b.row(r));
        }
        assert!(project_aesthetic(&Tensor::zeros(&[3, 6]), &w).is_err());
    }

    #[test]
    fn single_token_attention_is_all_ones() {
        let w = weights(8, 6, 2, 4);
        let mut rng = Rng::new(5);
        let x = rng.normal_tensor(&[5, 8]);
        let f = rng.normal_tensor(&[1, 6]);
        let (_, p) = content_attention(&x, &f, &w).unwrap();
        assert_eq!(p.shape(), &[2, 5, 1]);
        assert!(p.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn attention_rows_sum_to_one_and_match_naive_loop() {
        for seed in 0..5 {
            let w = weights(8, 6, 4, seed);
            let mut rng = Rng::new(100 + seed);
            let x = rng.normal_scaled(&[7, 8], 2.0);
            let f = rng.normal_scaled(&[5, 6], 2.0);
            let (out, p) = content_attention(&x, &f, &w).unwrap();
            for row in p.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let reference = naive(&x, &f, &w.w_q, &w.w_kc, &w.w_vc, 4);
            for (a, b) in out.data().iter().zip(&reference) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn vanishing_aesthetic_branch_is_exact() {
        let wd = weights(8, 6, 2, 6);
        let w = VMixAttentionWeights::<f32> {
            w_q: wd.w_q.cast(),
            w_kc: wd.w_kc.cast(),
            w_vc: wd.w_vc.cast(),
            w_va: wd.w_va.as_ref().map(|t| t.cast()),
            heads: 2,
        };
        let mut rng = Rng::new(7);
        let x = rng.normal_tensor(&[9, 8]);
        let f_c = rng.normal_tensor(&[4, 6]);
        let f_a = rng.normal_tensor(&[4, 6]);
        let (content, _) = content_attention(&x, &f_c, &w).unwrap();
        let at0 = value_mixed_attention(&x, &f_c, &f_a, 0.0, &w).unwrap();
        assert!(at0.bit_eq(&content));
        let zero = value_mixed_attention(&x, &f_c, &Tensor::zeros(&[4, 6]), 1.0, &w).unwrap();
        assert!(zero.bit_eq(&content));
        assert!(value_mixed_attention(&x, &f_c, &f_a, -1.0, &w).is_err());
    }

    #[test]
    fn lambda_enters_linearly() {
        let w = weights(8, 6, 2, 8);
        let mut rng = Rng::new(9);
        let x = rng.normal_tensor(&[9, 8]);
        let f_c = rng.normal_tensor(&[4, 6]);
        let f_a = rng.normal_tensor(&[4, 6]);
        let at = |l: f64| value_mixed_attention(&x, &f_c, &f_a, l, &w).unwrap();
        let (x0, x1, x2) = (at(0.0), at(1.0), at(2.0));
        let lhs = x2.sub(&x0).unwrap();
        let rhs = x1.sub(&x0).unwrap().scale(2.0);
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn both_branches_consume_one_probability_map() {
        let w = weights(8, 6, 2, 10);
        let mut rng = Rng::new(11);
        let mut g = Graph::inference();
        let vars = bind(&mut g, &w);
        let x = g.constant(rng.normal_tensor(&[3, 8]));
        let f_c = g.constant(rng.normal_tensor(&[4, 6]));
        let f_a = g.constant(rng.normal_tensor(&[4, 6]));
        let m = mixed_attention(&mut g, x, f_c, Some(f_a), 1.0, &vars).unwrap();
        let ap = m.aesthetic_probs.unwrap();
        assert_eq!(ap, m.content_probs);
        assert!(g.value(ap).bit_eq(g.value(m.content_probs)));
    }

    #[test]
    fn connector_gets_gradient_frozen_projections_do_not() {
        let mut rng = Rng::new(12);
        let (n, c, d, dm) = (2, 4, 6, 8);
        let mut store = ParamStore::<f64>::new();
        ProjectionWeights::init(n, c, d, &mut rng).insert_into(&mut store).unwrap();
        let w = weights(dm, d, 2, 13);
        store.insert("q.weight", w.w_q.clone()).unwrap();
        store.insert("kc.weight", w.w_kc.clone()).unwrap();
        store.insert("vc.weight", w.w_vc.clone()).unwrap();
        store.insert("va.weight", w.w_va.clone().unwrap()).unwrap();
        let trainable: Vec<bool> = store.names().map(|n| n.starts_with("proj.") || n == "va.weight").collect();
        let mut tape = Tape::new(&store, trainable);
        let f_t = tape.g.constant(rng.normal_tensor(&[n, d]));
        let f_a = project_on_tape(&mut tape, f_t).unwrap();
        let vars = CrossAttnVars {
            q: LinearVars::resolve(&mut tape, "q", None).unwrap(),
            kc: LinearVars::resolve(&mut tape, "kc", None).unwrap(),
            vc: LinearVars::resolve(&mut tape, "vc", None).unwrap(),
            va: Some(tape.param("va.weight").unwrap()),
            heads: 2,
        };
        let x = tape.g.constant(rng.normal_tensor(&[5, dm]));
        let f_c = tape.g.constant(rng.normal_tensor(&[c, d]));
        let m = mixed_attention(&mut tape.g, x, f_c, Some(f_a), 1.0, &vars).unwrap();
        let target = tape.g.constant(rng.normal_tensor(&[5, dm]));
        let loss = tape.g.mse(m.out, target).unwrap();
        let grads = tape.param_grads(loss).unwrap();
        let zw = grads[store.index_of(PROJ_ZERO_W).unwrap()].as_ref().unwrap();
        assert!(zw.max_abs() > 0.0);
        for frozen in ["q.weight", "kc.weight", "vc.weight"] {
            assert!(grads[store.index_of(frozen).unwrap()].is_none());
        }
    }
}
