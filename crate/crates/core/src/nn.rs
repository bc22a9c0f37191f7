//! Neural building blocks on top of the autodiff tape.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Mat, Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};

pub mod init {
    use super::*;

    pub fn normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
        Array2::from_shape_simple_fn((rows, cols), || {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
    }

    /// Random matrix with orthonormal rows when `rows <= cols`, orthonormal
    /// columns otherwise (modified Gram–Schmidt on a Gaussian draw).
    pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
        let (short, long) = if rows <= cols { (rows, cols) } else { (cols, rows) };
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
        while basis.len() < short {
            let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-10 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        let mut out = Array2::zeros((short, long));
        for (i, b) in basis.iter().enumerate() {
            out.row_mut(i).assign(&ndarray::ArrayView1::from(b));
        }
        if rows <= cols {
            out
        } else {
            out.reversed_axes().as_standard_layout().to_owned()
        }
    }
}

/// Dense affine map `x Wᵀ + b` with weight `[out × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init::xavier_uniform(output, input, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, output))));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.matmul_t(x, p.var(self.weight));
        match self.bias {
            Some(b) => tape.add_row(y, p.var(b)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, width))),
            shift: store.add(format!("{name}.shift"), Array2::zeros((1, width))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let y = tape.layer_norm(x, Self::EPS);
        let y = tape.mul_row(y, p.var(self.gain));
        tape.add_row(y, p.var(self.shift))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TransformerShape {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FF(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    norm_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    heads: usize,
}

impl TransformerLayer {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        shape: &TransformerShape,
        rng: &mut R,
    ) -> Self {
        let d = shape.width;
        let hidden = shape.ff_mult * d;
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d),
            query: Linear::new(store, &format!("{name}.attn.query"), d, d, true, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), d, d, true, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), d, d, true, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), d, d, true, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), d),
            ff_in: Linear::new(store, &format!("{name}.ff.in"), d, hidden, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ff.out"), hidden, d, true, rng),
            heads: shape.heads,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, group: usize) -> Var {
        let h = self.norm_attn.forward(tape, p, x);
        let q = self.query.forward(tape, p, h);
        let k = self.key.forward(tape, p, h);
        let v = self.value.forward(tape, p, h);
        let a = tape.attention(q, k, v, group, self.heads);
        let a = self.out.forward(tape, p, a);
        let x = tape.add(x, a);
        let h = self.norm_ff.forward(tape, p, x);
        let h = self.ff_in.forward(tape, p, h);
        let h = tape.gelu(h);
        let h = self.ff_out.forward(tape, p, h);
        tape.add(x, h)
    }
}

/// Stack of [`TransformerLayer`]s applied to sequences laid out as
/// consecutive row blocks of length `group`.
#[derive(Clone, Debug)]
pub struct Transformer {
    layers: Vec<TransformerLayer>,
    pub shape: TransformerShape,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        shape: TransformerShape,
        rng: &mut R,
    ) -> Self {
        assert!(shape.heads > 0 && shape.width.is_multiple_of(shape.heads), "width must divide into heads");
        let layers = (0..shape.layers)
            .map(|l| TransformerLayer::new(store, &format!("{name}.layer{l}"), &shape, rng))
            .collect();
        Self { layers, shape }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var, group: usize) -> Var {
        for layer in &self.layers {
            x = layer.forward(tape, p, x, group);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram_error(m: &Mat) -> f64 {
        let g = if m.nrows() <= m.ncols() {
            m.dot(&m.t())
        } else {
            m.t().dot(m)
        };
        let eye = Array2::<f64>::eye(g.nrows());
        (&g - &eye).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn orthogonal_init_wide_and_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wide = init::orthogonal(8, 32, &mut rng);
        assert_eq!(wide.dim(), (8, 32));
        assert!(gram_error(&wide) < 1e-10);
        let tall = init::orthogonal(20, 6, &mut rng);
        assert_eq!(tall.dim(), (20, 6));
        assert!(gram_error(&tall) < 1e-10);
    }

    #[test]
    fn transformer_preserves_shape_and_is_deterministic() {
        let shape = TransformerShape {
            width: 8,
            layers: 2,
            heads: 2,
            ff_mult: 4,
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut store = ParamStore::new();
            let tf = Transformer::new(&mut store, "tf", shape, &mut rng);
            let x = init::normal(12, 8, 1.0, &mut rng);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let xv = tape.constant(x);
            let y = tf.forward(&mut tape, &p, xv, 3);
            tape.value(y).clone()
        };
        let a = run();
        assert_eq!(a.dim(), (12, 8));
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, run());
    }
}
