//! The quantized autoencoder that turns a CF embedding into `n` descriptor
//! tokens and back.
//!
//! Layout convention: a batch of `B` entities with `n` aspects is stored as a
//! `[B·n × d]` matrix where rows `b·n .. b·n + n` belong to entity `b`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::codebook::{nearest_index, nearest_indices, Projected};
use crate::error::{FaceError, Result};
use crate::nn::{init, Linear, Transformer, TransformerShape};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    /// Descriptors per entity (`n`).
    pub descriptors: usize,
    /// Residual quantization levels (`H`).
    pub levels: usize,
    /// Quantization width (`d`).
    pub dim: usize,
    /// Commitment weight.
    pub beta: f64,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            descriptors: 16,
            levels: 3,
            dim: 256,
            beta: 0.25,
            layers: 2,
            heads: 4,
            ff_mult: 4,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if self.descriptors == 0 {
            return Err(FaceError::Config("descriptor count must be at least 1".into()));
        }
        if self.levels == 0 {
            return Err(FaceError::Config("need at least one quantization level".into()));
        }
        if !(self.beta > 0.0) {
            return Err(FaceError::Config("commitment weight must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(FaceError::Config(format!(
                "quantization dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    fn shape(&self) -> TransformerShape {
        TransformerShape {
            width: self.dim,
            layers: self.layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
        }
    }
}

/// Residual quantization of one aspect vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    /// Codeword index chosen at each level.
    pub codes: Vec<usize>,
    /// `r⁽¹⁾ = z_e` through `r⁽ᴴ⁺¹⁾`.
    pub residuals: Vec<Array1<f64>>,
    /// `z_q`, the sum of the selected codewords.
    pub quantized: Array1<f64>,
}

impl QuantizationResult {
    /// The descriptor token is the first-level code.
    pub fn descriptor_id(&self) -> usize {
        self.codes[0]
    }

    /// Forward value of `z_e + sg(z_q − z_e)`, which is `z_q`.
    pub fn straight_through_output(&self) -> &Array1<f64> {
        &self.quantized
    }
}

/// Greedy residual quantization against one shared codebook.
pub fn residual_quantize(
    z_e: ArrayView1<f64>,
    codebook: ArrayView2<f64>,
    sq_norms: &[f64],
    levels: usize,
) -> QuantizationResult {
    let mut residual = z_e.to_owned();
    let mut codes = Vec::with_capacity(levels);
    let mut residuals = Vec::with_capacity(levels + 1);
    let mut quantized = Array1::zeros(z_e.len());
    for _ in 0..levels {
        let k = nearest_index(residual.view(), codebook, sq_norms);
        let c = codebook.row(k);
        codes.push(k);
        quantized += &c;
        let next = &residual - &c;
        residuals.push(residual);
        residual = next;
    }
    residuals.push(residual);
    QuantizationResult {
        codes,
        residuals,
        quantized,
    }
}

/// Quantizes every row of `z_e` independently.
pub fn quantize_rows(
    z_e: ArrayView2<f64>,
    codebook: ArrayView2<f64>,
    sq_norms: &[f64],
    levels: usize,
) -> Vec<QuantizationResult> {
    let rows: Vec<ArrayView1<f64>> = z_e.rows().into_iter().collect();
    rows.into_par_iter()
        .map(|r| residual_quantize(r, codebook, sq_norms, levels))
        .collect()
}

/// Reconstruction, quantization and total mapping loss for one entity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapLoss {
    pub recons: f64,
    pub quantization: f64,
    pub total: f64,
}

/// `‖e_re − e‖²` plus, summed over aspects and levels,
/// `‖r⁽ʰ⁾ − c⁽ʰ⁾‖² + β‖c⁽ʰ⁾ − r⁽ʰ⁾‖²` (the two terms differ only in which side
/// receives gradient).
pub fn map_loss(
    e: ArrayView1<f64>,
    e_re: ArrayView1<f64>,
    aspects: &[QuantizationResult],
    beta: f64,
) -> MapLoss {
    let recons = (&e_re - &e).mapv(|x| x * x).sum();
    let mut quantization = 0.0;
    for q in aspects {
        for h in 0..q.codes.len() {
            // r⁽ʰ⁾ − c⁽ʰ⁾ = r⁽ʰ⁺¹⁾
            let gap = q.residuals[h + 1].mapv(|x| x * x).sum();
            quantization += (1.0 + beta) * gap;
        }
    }
    MapLoss {
        recons,
        quantization,
        total: recons + quantization,
    }
}

/// Tape nodes and values from one mapper pass over a batch.
pub struct MapperForward {
    pub batch: usize,
    /// Aspect projections `e_i`, `[B·n × d]`.
    pub projections: Var,
    /// Encoder outputs `z_e`, `[B·n × d]`.
    pub z_e: Var,
    /// Codes per aspect row, `H` each.
    pub codes: Vec<Vec<usize>>,
    /// Residual values `r⁽¹⁾..r⁽ᴴ⁺¹⁾`, each `[B·n × d]`.
    pub residuals: Vec<Mat>,
    /// `z_e + sg(z_q − z_e)`.
    pub quantized_st: Var,
    /// `z_e + sg(c⁽¹⁾ − z_e)`: descriptor embeddings with a straight-through path.
    pub descriptors_st: Var,
    /// Reconstructed CF embedding, `[B × d_cf]`.
    pub e_re: Var,
    /// Batch mean of `‖e_re − e‖²`.
    pub recons: Var,
    /// Batch mean of the per-entity quantization loss.
    pub quantization: Var,
    /// `recons + quantization`.
    pub total: Var,
}

impl MapperForward {
    /// First-level codes grouped per entity.
    pub fn descriptor_ids(&self, n: usize) -> Vec<Vec<usize>> {
        self.codes
            .chunks(n)
            .map(|chunk| chunk.iter().map(|c| c[0]).collect())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Mapper {
    pub config: MapperConfig,
    pub cf_dim: usize,
    heads: ParamId,
    encoder_positions: ParamId,
    encoder: Transformer,
    decoder_positions: ParamId,
    decoder: Transformer,
    projector: Linear,
}

const POSITION_STD: f64 = 0.1;

impl Mapper {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: MapperConfig,
        cf_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (n, d) = (config.descriptors, config.dim);
        let mut heads = Array2::zeros((n * d, cf_dim));
        for i in 0..n {
            let head = init::orthogonal(d, cf_dim, rng);
            heads.slice_mut(ndarray::s![i * d..(i + 1) * d, ..]).assign(&head);
        }
        let heads = store.add("mapper.heads", heads);
        let encoder_positions =
            store.add("mapper.encoder.positions", init::normal(n, d, POSITION_STD, rng));
        let encoder = Transformer::new(store, "mapper.encoder", config.shape(), rng);
        let decoder_positions =
            store.add("mapper.decoder.positions", init::normal(n, d, POSITION_STD, rng));
        let decoder = Transformer::new(store, "mapper.decoder", config.shape(), rng);
        let projector = Linear::new(store, "mapper.projector", n * d, cf_dim, true, rng);
        Ok(Self {
            config,
            cf_dim,
            heads,
            encoder_positions,
            encoder,
            decoder_positions,
            decoder,
            projector,
        })
    }

    pub fn heads_param(&self) -> ParamId {
        self.heads
    }

    pub fn decoder_positions_param(&self) -> ParamId {
        self.decoder_positions
    }

    pub fn projector(&self) -> &Linear {
        &self.projector
    }

    /// The `i`-th projection head `W_i` as a `[d × d_cf]` matrix.
    pub fn head(&self, store: &ParamStore, i: usize) -> Mat {
        let d = self.config.dim;
        store
            .get(self.heads)
            .slice(ndarray::s![i * d..(i + 1) * d, ..])
            .to_owned()
    }

    /// `e [B × d_cf] → [B·n × d]` with row `b·n + i` equal to `W_i e_b`.
    pub fn multi_project(&self, tape: &mut Tape, p: &Bound, e: Var) -> Var {
        let (batch, _) = tape.shape(e);
        let all = tape.matmul_t(e, p.var(self.heads));
        tape.reshape(all, batch * self.config.descriptors, self.config.dim)
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, projections: Var) -> Var {
        let x = tape.add_tiled(projections, p.var(self.encoder_positions));
        self.encoder.forward(tape, p, x, self.config.descriptors)
    }

    /// `[B·n × d]` quantized aspects to `[B × d_cf]`.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, quantized: Var) -> Var {
        let (rows, _) = tape.shape(quantized);
        let n = self.config.descriptors;
        let x = tape.add_tiled(quantized, p.var(self.decoder_positions));
        let x = self.decoder.forward(tape, p, x, n);
        let concat = tape.reshape(x, rows / n, n * self.config.dim);
        self.projector.forward(tape, p, concat)
    }

    /// Full pass with losses. Selected codewords are rebuilt on the tape as
    /// `C₀[k] · W_cᵀ` (so the codebook-side loss reaches `W_c`); `projected`
    /// holds the cached `C` used for the argmin.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        e: Var,
        frozen: &Mat,
        projection: Var,
        projected: &Projected,
    ) -> MapperForward {
        let (batch, _) = tape.shape(e);
        let beta = self.config.beta;
        let projections = self.multi_project(tape, p, e);
        let z_e = self.encode(tape, p, projections);

        let mut residual = z_e;
        let mut codes: Vec<Vec<usize>> = vec![Vec::with_capacity(self.config.levels); batch * self.config.descriptors];
        let mut residuals = Vec::with_capacity(self.config.levels + 1);
        let mut quantized = Array2::zeros(tape.shape(z_e));
        let mut first_level = None;
        let mut q_terms = Vec::with_capacity(self.config.levels);
        for _ in 0..self.config.levels {
            let r_value = tape.value(residual).clone();
            let level = nearest_indices(r_value.view(), projected.matrix.view(), &projected.sq_norms);
            for (row, &k) in level.iter().enumerate() {
                codes[row].push(k);
            }
            let rows = tape.constant(frozen.select(Axis(0), &level));
            let c = tape.matmul_t(rows, projection);
            let c_value = tape.value(c).clone();
            quantized += &c_value;
            if first_level.is_none() {
                first_level = Some(c_value);
            }
            // codebook side: ‖sg[r] − c‖²
            let r_sg = tape.detach(residual);
            let gap_c = tape.sub(r_sg, c);
            let gap_c = tape.square(gap_c);
            let codebook_term = tape.sum_all(gap_c);
            // commitment side: β‖sg[c] − r‖²
            let c_sg = tape.detach(c);
            let gap_r = tape.sub(c_sg, residual);
            let gap_r = tape.square(gap_r);
            let commit = tape.sum_all(gap_r);
            let commit = tape.scale(commit, beta);
            q_terms.push(tape.add(codebook_term, commit));
            residuals.push(r_value);
            residual = tape.sub(residual, c_sg);
        }
        residuals.push(tape.value(residual).clone());

        let mut q_total = q_terms[0];
        for &t in &q_terms[1..] {
            q_total = tape.add(q_total, t);
        }
        let quantization = tape.scale(q_total, 1.0 / batch as f64);

        let quantized_st = tape.straight_through(z_e, quantized);
        let descriptors_st = tape.straight_through(z_e, first_level.unwrap());
        let e_re = self.decode(tape, p, quantized_st);
        let diff = tape.sub(e_re, e);
        let sq = tape.square(diff);
        let sum = tape.sum_all(sq);
        let recons = tape.scale(sum, 1.0 / batch as f64);
        let total = tape.add(recons, quantization);
        MapperForward {
            batch,
            projections,
            z_e,
            codes,
            residuals,
            quantized_st,
            descriptors_st,
            e_re,
            recons,
            quantization,
            total,
        }
    }

    /// Gradient-free pass returning encoder outputs, per-aspect quantization
    /// and reconstructions for every row of `e`.
    pub fn infer(&self, store: &ParamStore, projected: &Projected, e: ArrayView2<f64>) -> Inference {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let ev = tape.constant(e.to_owned());
        let proj = self.multi_project(&mut tape, &p, ev);
        let z_e = self.encode(&mut tape, &p, proj);
        let z_e = tape.value(z_e).clone();
        let aspects = quantize_rows(
            z_e.view(),
            projected.matrix.view(),
            &projected.sq_norms,
            self.config.levels,
        );
        let mut zq = Array2::zeros(z_e.dim());
        for (mut row, q) in zq.axis_iter_mut(Axis(0)).zip(&aspects) {
            row.assign(&q.quantized);
        }
        let zq = tape.constant(zq);
        let e_re = self.decode(&mut tape, &p, zq);
        Inference {
            z_e,
            aspects,
            e_re: tape.value(e_re).clone(),
            descriptors: self.config.descriptors,
        }
    }

    /// Decodes an embedding from `n` descriptor tokens, standing in each
    /// token's projected codeword for the full residual sum.
    pub fn generate_from_descriptors(
        &self,
        store: &ParamStore,
        projected: &Projected,
        token_ids: &[usize],
    ) -> Result<Array1<f64>> {
        if token_ids.is_empty() {
            return Err(FaceError::EmptyInput("descriptor token list".into()));
        }
        if token_ids.len() != self.config.descriptors {
            return Err(FaceError::Shape(format!(
                "expected {} descriptor tokens, got {}",
                self.config.descriptors,
                token_ids.len()
            )));
        }
        let size = projected.matrix.nrows();
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= size) {
            return Err(FaceError::IndexOutOfRange {
                kind: "token",
                index: bad,
                size,
            });
        }
        let zq = projected.matrix.select(Axis(0), token_ids);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let zq = tape.constant(zq);
        let out = self.decode(&mut tape, &p, zq);
        Ok(tape.value(out).row(0).to_owned())
    }
}

/// Result of [`Mapper::infer`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub z_e: Mat,
    /// One entry per aspect row (`B·n`).
    pub aspects: Vec<QuantizationResult>,
    pub e_re: Mat,
    descriptors: usize,
}

impl Inference {
    /// Level-1 token ids grouped per entity.
    pub fn descriptor_ids(&self) -> Vec<Vec<usize>> {
        self.aspects
            .chunks(self.descriptors)
            .map(|c| c.iter().map(QuantizationResult::descriptor_id).collect())
            .collect()
    }

    /// Full code matrices (`n × H`) per entity.
    pub fn codes(&self) -> Vec<Vec<Vec<usize>>> {
        self.aspects
            .chunks(self.descriptors)
            .map(|c| c.iter().map(|q| q.codes.clone()).collect())
            .collect()
    }

    /// Level-1 codeword vectors, `[B·n × d]`.
    pub fn first_level(&self, projected: &Projected) -> Mat {
        let ids: Vec<usize> = self.aspects.iter().map(|q| q.codes[0]).collect();
        projected.matrix.select(Axis(0), &ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::squared_norms;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> MapperConfig {
        MapperConfig {
            descriptors: 3,
            levels: 2,
            dim: 4,
            beta: 0.25,
            layers: 1,
            heads: 2,
            ff_mult: 2,
        }
    }

    #[test]
    fn config_validation() {
        assert!(MapperConfig::default().validate().is_ok());
        let bad = MapperConfig { descriptors: 0, ..MapperConfig::default() };
        assert!(bad.validate().is_err());
        let bad = MapperConfig { levels: 0, ..MapperConfig::default() };
        assert!(bad.validate().is_err());
        let bad = MapperConfig { beta: 0.0, ..MapperConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn exact_codeword_quantizes_to_itself() {
        let c = array![[1.0, 2.0], [-1.0, 0.5], [3.0, 3.0]];
        let n = squared_norms(c.view());
        let q = residual_quantize(c.row(1), c.view(), &n, 1);
        assert_eq!(q.codes, vec![1]);
        assert_eq!(q.quantized, c.row(1).to_owned());
        assert_eq!(q.residuals[1], array![0.0, 0.0]);
        assert_eq!(q.descriptor_id(), 1);
    }

    #[test]
    fn zero_codeword_is_a_fixed_point() {
        let c = array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        let n = squared_norms(c.view());
        let q = residual_quantize(array![0.0, 0.0].view(), c.view(), &n, 3);
        assert_eq!(q.codes, vec![1, 1, 1]);
        assert_eq!(q.quantized, array![0.0, 0.0]);
    }

    #[test]
    fn map_loss_formula() {
        let e = array![1.0, 2.0];
        let q = QuantizationResult {
            codes: vec![0],
            residuals: vec![array![2.0, 0.0], array![2.0, 0.0]],
            quantized: array![0.0, 0.0],
        };
        let l = map_loss(e.view(), e.view(), &[q], 0.25);
        assert_eq!(l.recons, 0.0);
        assert_eq!(l.quantization, 5.0);
        let perfect = QuantizationResult {
            codes: vec![0],
            residuals: vec![array![1.0, 1.0], array![0.0, 0.0]],
            quantized: array![1.0, 1.0],
        };
        assert_eq!(map_loss(e.view(), e.view(), &[perfect], 0.25).total, 0.0);
    }

    #[test]
    fn heads_are_orthogonal_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let m = Mapper::new(&mut store, small_config(), 6, &mut rng).unwrap();
        for i in 0..3 {
            let w = m.head(&store, i);
            let err = (&w.dot(&w.t()) - &Array2::<f64>::eye(4)).mapv(|x| x * x).sum().sqrt();
            assert!(err < 1e-5);
        }
    }

    #[test]
    fn generate_rejects_bad_token_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let m = Mapper::new(&mut store, small_config(), 6, &mut rng).unwrap();
        let matrix = init::normal(5, 4, 1.0, &mut rng);
        let projected = Projected::from_matrix(matrix);
        assert!(matches!(
            m.generate_from_descriptors(&store, &projected, &[]),
            Err(FaceError::EmptyInput(_))
        ));
        assert!(m.generate_from_descriptors(&store, &projected, &[0, 1]).is_err());
        assert!(m.generate_from_descriptors(&store, &projected, &[0, 1, 9]).is_err());
        let a = m.generate_from_descriptors(&store, &projected, &[2, 2, 2]).unwrap();
        let b = m.generate_from_descriptors(&store, &projected, &[2, 2, 2]).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
    }
}
