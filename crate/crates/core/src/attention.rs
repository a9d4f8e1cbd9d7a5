//! Position-guided light adapter.
//!
//! Four groups of learnable light queries condense background features
//! through cross attention whose weights are biased by linear decay maps,
//! one per direction. The condensed queries are then injected into the
//! foreground positions of a latent, with each position weighting the four
//! groups by its own distance to the corresponding image edge.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::{FeatureGrid, Mask};
use crate::pipeline::LatentGrid;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Left,
    Right,
    Top,
    Down,
}

impl Direction {
    /// Group order inside a [`LightQueryBank`].
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Top, Direction::Down];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Top => "top",
            Direction::Down => "down",
        }
    }

    /// Linear profile value at normalized coordinates `(x, y)` in `[0, 1]²`.
    #[inline]
    pub fn profile(self, x: f64, y: f64) -> f64 {
        match self {
            Direction::Left => 1.0 - x,
            Direction::Right => x,
            Direction::Top => 1.0 - y,
            Direction::Down => y,
        }
    }
}

/// Normalized coordinate of index `i` along an axis of length `n`; a
/// single-cell axis sits at the middle.
#[inline]
fn unit_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        i as f64 / (n - 1) as f64
    } else {
        0.5
    }
}

/// Attenuation coefficients decaying linearly away from one edge.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayMap {
    pub direction: Direction,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DecayMap {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// Decay map for `direction`: 1 on the source edge, 0 on the far edge. An
/// axis of length one along the decay direction yields all ones.
pub fn make_decay_map(direction: Direction, rows: usize, cols: usize) -> Result<DecayMap> {
    if rows == 0 || cols == 0 {
        return Err(Error::dim(format!("empty {rows}x{cols} decay map")));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = match direction {
                Direction::Left | Direction::Right if cols == 1 => 1.0,
                Direction::Top | Direction::Down if rows == 1 => 1.0,
                _ => direction.profile(unit_coord(c, cols), unit_coord(r, rows)),
            };
            values.push(v);
        }
    }
    Ok(DecayMap {
        direction,
        rows,
        cols,
        values,
    })
}

/// Four direction groups of `n_q` query vectors each, stored as a
/// `[4·n_q, dim]` matrix in [`Direction::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct LightQueryBank {
    n_q: usize,
    queries: Tensor,
}

impl LightQueryBank {
    pub fn new(n_q: usize, queries: Tensor) -> Result<Self> {
        let (rows, _) = queries.rc()?;
        if n_q == 0 || rows != 4 * n_q {
            return Err(Error::dim(format!("bank needs 4x{n_q} rows, got {rows}")));
        }
        if !queries.all_finite() {
            return Err(Error::param("light queries must be finite"));
        }
        Ok(LightQueryBank { n_q, queries })
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn dim(&self) -> usize {
        self.queries.shape()[1]
    }

    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    /// Rows belonging to one direction group.
    pub fn group(&self, dir: Direction) -> &[f64] {
        let g = Direction::ALL.iter().position(|&d| d == dir).unwrap();
        let d = self.dim();
        &self.queries.data()[g * self.n_q * d..(g + 1) * self.n_q * d]
    }
}

/// Row-stochastic attention matrix, kept for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl AttentionWeights {
    fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = t.rc().expect("attention weights are rank-2");
        AttentionWeights {
            rows,
            cols,
            values: t.data().to_vec(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// Where the direction bias enters the attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Multiply softmax probabilities by the bias, then renormalize rows.
    /// Equivalent to adding `ln(bias)` to the logits.
    PostSoftmax,
    /// Multiply the scaled logits by the bias before the softmax.
    PreSoftmax,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::PostSoftmax => "post_softmax",
            MaskMode::PreSoftmax => "pre_softmax",
        }
    }
}

/// Direction-bias switch shared by condensation and injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Masking {
    pub enabled: bool,
    pub mode: MaskMode,
}

impl Default for Masking {
    fn default() -> Self {
        Masking {
            enabled: true,
            mode: MaskMode::PostSoftmax,
        }
    }
}

/// Projection weights of one attention: queries come from a `cq`-wide
/// source, keys and values from a `ckv`-wide source, `da` is the inner width.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProj {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
    pub heads: usize,
}

impl AttentionProj {
    fn check(&self, cq: usize, ckv: usize) -> Result<()> {
        let da = self.q.shape().get(1).copied().unwrap_or(0);
        let ok = self.q.shape() == [cq, da]
            && self.k.shape() == [ckv, da]
            && self.v.shape() == [ckv, da]
            && self.o.shape() == [da, cq]
            && self.heads >= 1
            && da % self.heads == 0;
        if !ok {
            return Err(Error::dim(format!(
                "projections q{:?} k{:?} v{:?} o{:?} (heads {}) do not fit query width {cq}, key width {ckv}",
                self.q.shape(),
                self.k.shape(),
                self.v.shape(),
                self.o.shape(),
                self.heads
            )));
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph) -> ProjVars {
        ProjVars {
            q: g.constant(self.q.clone()),
            k: g.constant(self.k.clone()),
            v: g.constant(self.v.clone()),
            o: g.constant(self.o.clone()),
            heads: self.heads,
        }
    }
}

/// Graph handles for an [`AttentionProj`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct ProjVars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub heads: usize,
}

/// Row-wise softmax followed by the optional direction bias.
pub fn masked_softmax(logits: &Tensor, bias: Option<&Tensor>, mode: MaskMode) -> Result<AttentionWeights> {
    logits.rc()?;
    if let Some(b) = bias {
        if b.shape() != logits.shape() {
            return Err(Error::dim("bias and logits differ in shape"));
        }
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let w = biased_softmax(&mut g, l, bias, mode);
    Ok(AttentionWeights::from_tensor(g.value(w)))
}

fn biased_softmax(g: &mut Graph, logits: Var, bias: Option<&Tensor>, mode: MaskMode) -> Var {
    match (bias, mode) {
        (None, _) => g.softmax_rows(logits),
        (Some(b), MaskMode::PostSoftmax) => {
            // p ⊙ b / Σ(p ⊙ b) as softmax(logits + ln b): the direct form
            // underflows once the softmax is peaked on a zero-bias column.
            let n = b.shape()[1];
            let live: Vec<f64> = b.data().chunks_exact(n).map(|r| r.iter().any(|&v| v > 0.0) as u8 as f64).collect();
            let lb = g.constant(b.map(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }));
            let biased = g.add(logits, lb);
            let p = g.softmax_rows(biased);
            g.mul_const(p, Tensor::from_fn(b.shape(), |i| live[i / n]))
        }
        (Some(b), MaskMode::PreSoftmax) => {
            let biased = g.mul_const(logits, b.clone());
            g.softmax_rows(biased)
        }
    }
}

/// Multi-head attention without the residual: returns the `[m, cq]` output
/// and the per-head weight matrices.
pub(crate) fn attend(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    proj: &ProjVars,
    bias: Option<&Tensor>,
    mode: MaskMode,
) -> (Var, Vec<Var>) {
    let q = g.matmul(queries, proj.q);
    let k = g.matmul(keys, proj.k);
    let v = g.matmul(keys, proj.v);
    let da = g.shape(q)[1];
    let dh = da / proj.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads_out = Vec::with_capacity(proj.heads);
    let mut weights = Vec::with_capacity(proj.heads);
    for h in 0..proj.heads {
        let (qh, kh, vh) = if proj.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_last(q, h * dh, (h + 1) * dh),
                g.slice_last(k, h * dh, (h + 1) * dh),
                g.slice_last(v, h * dh, (h + 1) * dh),
            )
        };
        let kt = g.transpose(kh);
        let raw = g.matmul(qh, kt);
        let logits = g.scale(raw, scale);
        let w = biased_softmax(g, logits, bias, mode);
        weights.push(w);
        heads_out.push(g.matmul(w, vh));
    }
    let merged = if heads_out.len() == 1 {
        heads_out[0]
    } else {
        g.concat_last(&heads_out)
    };
    (g.matmul(merged, proj.o), weights)
}

/// Condensation bias `[4·n_q, 4·n_q + rows·cols]`: query-to-query columns
/// stay 1, background columns carry the flattened decay map of the row's
/// direction group.
pub fn condense_bias(n_q: usize, rows: usize, cols: usize) -> Tensor {
    let maps: Vec<DecayMap> = Direction::ALL
        .iter()
        .map(|&d| make_decay_map(d, rows, cols).expect("nonzero dims"))
        .collect();
    let nq_total = 4 * n_q;
    let width = nq_total + rows * cols;
    Tensor::from_fn(&[nq_total, width], |i| {
        let (r, c) = (i / width, i % width);
        if c < nq_total {
            1.0
        } else {
            maps[r / n_q].values[c - nq_total]
        }
    })
}

/// Injection bias `[positions, 4·n_q]`: each foreground cell `(r, c)` weights
/// the four groups by the direction profiles at its normalized position.
pub fn inject_bias(positions: &[(usize, usize)], rows: usize, cols: usize, n_q: usize) -> Tensor {
    let width = 4 * n_q;
    Tensor::from_fn(&[positions.len(), width], |i| {
        let (p, c) = (i / width, i % width);
        let (r, cc) = positions[p];
        Direction::ALL[c / n_q].profile(unit_coord(cc, cols), unit_coord(r, rows))
    })
}

/// Condense `feat: [rows·cols, D]` into the bank `[4·n_q, D]`; returns the
/// updated bank (residual included) and per-head weights.
pub(crate) fn condense_graph(
    g: &mut Graph,
    bank: Var,
    feat: Var,
    rows: usize,
    cols: usize,
    n_q: usize,
    proj: &ProjVars,
    masking: Masking,
) -> (Var, Vec<Var>) {
    let kv = g.concat_rows(bank, feat);
    let bias = masking.enabled.then(|| condense_bias(n_q, rows, cols));
    let (out, weights) = attend(g, bank, kv, proj, bias.as_ref(), masking.mode);
    (g.add(bank, out), weights)
}

/// Inject the bank into the foreground cells of `latent: [rows, cols, C]`.
/// Background cells are copied through unchanged.
pub(crate) fn inject_graph(
    g: &mut Graph,
    latent: Var,
    bank: Var,
    fg_mask: &Mask,
    n_q: usize,
    proj: &ProjVars,
    masking: Masking,
) -> (Var, Vec<Var>) {
    let (rows, cols, c) = g.value(latent).hwc().expect("latent rank");
    let positions: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |cc| (r, cc)))
        .filter(|&(r, cc)| fg_mask.get(r, cc))
        .collect();
    if positions.is_empty() {
        return (latent, Vec::new());
    }
    let idx: Vec<usize> = positions.iter().map(|&(r, cc)| r * cols + cc).collect();
    let flat = g.reshape(latent, &[rows * cols, c]);
    let q = g.index_rows(flat, &idx);
    let bias = masking.enabled.then(|| inject_bias(&positions, rows, cols, n_q));
    let (upd, weights) = attend(g, q, bank, proj, bias.as_ref(), masking.mode);
    let merged = g.add_rows_at(flat, upd, &idx);
    (g.reshape(merged, &[rows, cols, c]), weights)
}

/// Condense background features into the light-query bank.
///
/// Returns the residual-updated bank and the attention weights of each head.
pub fn condense_light(
    bg_feat: &FeatureGrid,
    bank: &LightQueryBank,
    proj: &AttentionProj,
    masking: Masking,
) -> Result<(LightQueryBank, Vec<AttentionWeights>)> {
    if bg_feat.depth() != bank.dim() {
        return Err(Error::dim(format!(
            "background depth {} vs query width {}",
            bg_feat.depth(),
            bank.dim()
        )));
    }
    proj.check(bank.dim(), bank.dim())?;
    let (rows, cols) = (bg_feat.height(), bg_feat.width());
    let mut g = Graph::new();
    let b = g.constant(bank.queries().clone());
    let f = g.constant(bg_feat.tensor().clone().reshaped(&[rows * cols, bank.dim()])?);
    let pv = proj.bind(&mut g);
    let (out, weights) = condense_graph(&mut g, b, f, rows, cols, bank.n_q(), &pv, masking);
    let new_bank = LightQueryBank::new(bank.n_q(), g.value(out).clone())?;
    Ok((
        new_bank,
        weights.iter().map(|&w| AttentionWeights::from_tensor(g.value(w))).collect(),
    ))
}

/// Inject light queries into the foreground cells of a latent grid.
pub fn inject_light(
    latent: &LatentGrid,
    bank: &LightQueryBank,
    fg_mask: &Mask,
    proj: &AttentionProj,
    masking: Masking,
) -> Result<(LatentGrid, Vec<AttentionWeights>)> {
    fg_mask.check_dims(latent.h(), latent.w())?;
    proj.check(latent.d(), bank.dim())?;
    let mut g = Graph::new();
    let z = g.constant(latent.tensor().clone());
    let b = g.constant(bank.queries().clone());
    let pv = proj.bind(&mut g);
    let (out, weights) = inject_graph(&mut g, z, b, fg_mask, bank.n_q(), &pv, masking);
    Ok((
        LatentGrid::from_tensor(g.value(out).clone())?,
        weights.iter().map(|&w| AttentionWeights::from_tensor(g.value(w))).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn rand_proj(rng: &mut ChaCha8Rng, cq: usize, ckv: usize, da: usize) -> AttentionProj {
        AttentionProj {
            q: rand_t(rng, &[cq, da]),
            k: rand_t(rng, &[ckv, da]),
            v: rand_t(rng, &[ckv, da]),
            o: rand_t(rng, &[da, cq]),
            heads: 1,
        }
    }

    #[test]
    fn decay_map_endpoints() {
        let left = make_decay_map(Direction::Left, 4, 3).unwrap();
        for r in 0..4 {
            assert_eq!(left.at(r, 0), 1.0);
            assert_eq!(left.at(r, 2), 0.0);
            assert_eq!(left.at(r, 1), 0.5);
        }
        let down = make_decay_map(Direction::Down, 5, 2).unwrap();
        assert_eq!(down.at(0, 1), 0.0);
        assert_eq!(down.at(4, 0), 1.0);
        let flat = make_decay_map(Direction::Right, 3, 1).unwrap();
        assert!(flat.values.iter().all(|&v| v == 1.0));
        assert!(matches!(make_decay_map(Direction::Top, 0, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn uniform_logits_with_left_bias_keep_left_column() {
        // 2x2 background, one query per group, equal logits via zero query projection.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 4;
        let feat = FeatureGrid::new(
            2,
            2,
            d,
            (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let bank = LightQueryBank::new(1, rand_t(&mut rng, &[4, d])).unwrap();
        let mut proj = rand_proj(&mut rng, d, d, d);
        proj.q = Tensor::zeros(&[d, d]);
        let (_, w) = condense_light(&feat, &bank, &proj, Masking::default()).unwrap();
        let row = w[0].row(0);
        // Oracle: uniform softmax over 8 keys, decay [1,0,1,0] on background columns.
        let raw = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let s: f64 = raw.iter().sum();
        for (a, b) in row.iter().zip(raw) {
            assert!((a - b / s).abs() < 1e-12);
        }
        let bg: Vec<f64> = row[4..].to_vec();
        assert!((bg[0] - bg[2]).abs() < 1e-15 && bg[1] == 0.0 && bg[3] == 0.0);
    }

    #[test]
    fn singleton_background_renormalizes_to_one() {
        let n = 4;
        let mut logits = Tensor::full(&[n, n + 1], f64::NEG_INFINITY);
        for r in 0..n {
            logits.data_mut()[r * (n + 1) + n] = 0.3 * r as f64;
        }
        let bias = condense_bias(1, 1, 1);
        let w = masked_softmax(&logits, Some(&bias), MaskMode::PostSoftmax).unwrap();
        for r in 0..n {
            assert_eq!(w.row(r)[n], 1.0);
            assert!(w.row(r)[..n].iter().all(|&v| v == 0.0));
        }
        // Each query then returns the single value plus its own residual.
        let value = [0.25, -1.5];
        let bank = [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]];
        for (r, q) in bank.iter().enumerate() {
            let out: Vec<f64> = (0..2).map(|k| q[k] + w.row(r)[n] * value[k]).collect();
            assert_eq!(out, vec![q[0] + 0.25, q[1] - 1.5]);
        }
    }

    #[test]
    fn all_ones_bias_equals_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 3;
        let feat = FeatureGrid::new(2, 3, d, vec![0.5; 18]).unwrap();
        let bank = LightQueryBank::new(1, rand_t(&mut rng, &[4, d])).unwrap();
        let mut proj = rand_proj(&mut rng, d, d, d);
        proj.q = Tensor::zeros(&[d, d]);
        let off = Masking {
            enabled: false,
            mode: MaskMode::PostSoftmax,
        };
        let (out, w) = condense_light(&feat, &bank, &proj, off).unwrap();
        for v in &w[0].values {
            assert!((v - 0.1).abs() < 1e-12);
        }
        // Output = bank + mean(values) · Wo.
        let keys: Vec<f64> = bank.queries().data().iter().copied().chain(vec![0.5; 18]).collect();
        for r in 0..4 {
            for j in 0..d {
                let mut acc = 0.0;
                for a in 0..d {
                    let mut mean_v = 0.0;
                    for k in 0..10 {
                        mean_v += (0..d).map(|c| keys[k * d + c] * proj.v.data()[c * d + a]).sum::<f64>() / 10.0;
                    }
                    acc += mean_v * proj.o.data()[a * d + j];
                }
                let expect = bank.queries().data()[r * d + j] + acc;
                assert!((out.queries().data()[r * d + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_foreground_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = LatentGrid::from_tensor(rand_t(&mut rng, &[4, 4, 5])).unwrap();
        let bank = LightQueryBank::new(2, rand_t(&mut rng, &[8, 3])).unwrap();
        let proj = rand_proj(&mut rng, 5, 3, 4);
        let (out, w) = inject_light(&z, &bank, &Mask::filled(4, 4, false), &proj, Masking::default()).unwrap();
        assert_eq!(out, z);
        assert!(w.is_empty());
    }

    #[test]
    fn left_edge_position_ignores_right_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = LatentGrid::from_tensor(rand_t(&mut rng, &[3, 3, 4])).unwrap();
        let bank = LightQueryBank::new(2, rand_t(&mut rng, &[8, 4])).unwrap();
        let proj = rand_proj(&mut rng, 4, 4, 4);
        let mask = Mask::from_fn(3, 3, |r, c| c == 0 && r == 1);
        let (_, w) = inject_light(&z, &bank, &mask, &proj, Masking::default()).unwrap();
        let row = w[0].row(0);
        let right: f64 = row[2..4].iter().sum();
        assert_eq!(right, 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_mask_is_rejected() {
        let z = LatentGrid::from_tensor(Tensor::zeros(&[2, 2, 4])).unwrap();
        let bank = LightQueryBank::new(1, Tensor::zeros(&[4, 4])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = rand_proj(&mut rng, 4, 4, 4);
        assert!(matches!(
            inject_light(&z, &bank, &Mask::filled(3, 2, true), &proj, Masking::default()),
            Err(Error::Dimension(_))
        ));
        let feat = FeatureGrid::new(2, 2, 3, vec![0.0; 12]).unwrap();
        assert!(matches!(
            condense_light(&feat, &bank, &proj, Masking::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn peaked_row_on_zero_bias_keeps_finite_gradients() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::new(&[1, 3], vec![800.0, 0.0, -5.0]).unwrap());
        let bias = Tensor::new(&[1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let w = biased_softmax(&mut g, l, Some(&bias), MaskMode::PostSoftmax);
        let loss = g.mse_const(w, &Tensor::new(&[1, 3], vec![0.0, 0.0, 1.0]).unwrap());
        let wv = g.value(w).data().to_vec();
        assert!((wv[1] + wv[2] - 1.0).abs() < 1e-12 && wv[0] == 0.0);
        let grads = g.backward(loss);
        assert!(grads.get(l).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bank_requires_four_groups() {
        assert!(LightQueryBank::new(2, Tensor::zeros(&[6, 3])).is_err());
        assert!(LightQueryBank::new(0, Tensor::zeros(&[0, 3])).is_err());
        let mut bad = Tensor::zeros(&[4, 2]);
        bad.data_mut()[3] = f64::NAN;
        assert!(LightQueryBank::new(1, bad).is_err());
    }
}
