//! Instance-level drift field over spatially aligned feature pairs.
//!
//! Queries are the K row vectors of the reconstructed feature map at one
//! layer of one image; candidates are all K ground-truth rows of the same
//! layer of the same image. For each temperature, a bidirectional softmax
//! over negative squared distances yields a row-stochastic weight matrix,
//! the drift of a query is the residual to its weighted candidate centroid,
//! and the per-temperature fields are RMS-normalized and summed.
//!
//! The training objective regresses each query to its drifted value with the
//! target held constant, so the only gradient path is the direct one through
//! the query copy: -2/(|L| K) * V(f_k) at each normalized query row. Nothing
//! here needs to be differentiated; [`batched_drift_loss`] computes fields on
//! plain values and hands the tape a frozen target.
//!
//! [`oracle`] reimplements everything with explicit per-candidate loops in
//! f64 and is the reference the vectorized path is tested against.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Elem, Tensor};

/// Row-normalized feature matrix (K locations x C channels).
#[derive(Debug, Clone)]
pub struct NormalizedFeatures<T: Elem> {
    rows: Tensor<T>,
    epsilon: T,
}

impl<T: Elem> NormalizedFeatures<T> {
    /// Wrap rows that are already normalized, validating the row-norm
    /// invariant: every norm is 0 (a zero row) or within [1 - 1e-4, 1].
    pub fn new(rows: Tensor<T>, epsilon: T) -> Result<Self> {
        if rows.shape().len() != 2 {
            return Err(Error::shape("NormalizedFeatures", format!("expected K x C, got {:?}", rows.shape())));
        }
        let (k, c) = (rows.shape()[0], rows.shape()[1]);
        for r in 0..k {
            let n = rows.data()[r * c..(r + 1) * c]
                .iter()
                .map(|&v| (v * v).as_f64())
                .sum::<f64>()
                .sqrt();
            if n != 0.0 && !(1.0 - 1e-4..=1.0 + 1e-9).contains(&n) {
                return Err(Error::invalid(
                    "NormalizedFeatures",
                    format!("row {r} has norm {n}, not normalized"),
                ));
            }
        }
        Ok(NormalizedFeatures { rows, epsilon })
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn k(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.rows.shape()[1]
    }
}

/// One temperature's weights and drift directions.
#[derive(Debug, Clone)]
pub struct TempField<T: Elem> {
    pub tau: T,
    /// Row-stochastic K x K joint weights.
    pub weights: Tensor<T>,
    /// K x C drift vectors.
    pub drift: Tensor<T>,
}

/// Full drift-field computation for one image layer.
#[derive(Debug, Clone)]
pub struct DriftFieldResult<T: Elem> {
    pub temps: Vec<TempField<T>>,
    /// Aggregated K x C field (per-temperature RMS normalization, summed).
    pub aggregated: Tensor<T>,
    /// (1/K) sum_k ||V(f_k)||^2, the layer's loss contribution.
    pub loss: T,
}

/// Shared small constants of the drift computation.
#[derive(Debug, Clone)]
pub struct DriftParams<T: Elem> {
    pub temps: Vec<T>,
    /// Row-normalization epsilon.
    pub eps_norm: T,
    /// Epsilon inside the per-temperature RMS square root.
    pub eps_agg: T,
    /// Above this K the K x K matrices are processed in row blocks.
    pub chunk_k: usize,
}

impl<T: Elem> Default for DriftParams<T> {
    fn default() -> Self {
        DriftParams {
            temps: vec![T::from_f64(0.05), T::from_f64(0.2)],
            eps_norm: T::from_f64(1e-8),
            eps_agg: T::from_f64(1e-8),
            chunk_k: 4096,
        }
    }
}

/// Row-wise l2 normalization: row / (||row|| + eps).
pub fn normalize_rows<T: Elem>(f: &Tensor<T>, eps: T) -> Result<NormalizedFeatures<T>> {
    if f.shape().len() != 2 {
        return Err(Error::shape("normalize_rows", format!("expected K x C, got {:?}", f.shape())));
    }
    if eps <= T::zero() {
        return Err(Error::invalid("normalize_rows", "eps must be positive"));
    }
    if !f.is_finite() {
        return Err(Error::NonFinite("normalize_rows"));
    }
    let (k, c) = (f.shape()[0], f.shape()[1]);
    let mut out = vec![T::zero(); k * c];
    for r in 0..k {
        let sl = &f.data()[r * c..(r + 1) * c];
        let n = sl.iter().map(|&v| v * v).sum::<T>().sqrt();
        let inv = T::one() / (n + eps);
        for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(sl) {
            *o = v * inv;
        }
    }
    Ok(NormalizedFeatures { rows: Tensor::from_vec(vec![k, c], out), epsilon: eps })
}

/// D_kj = ||f_k - g_j||^2, computed as ||f||^2 + ||g||^2 - 2 f.g and clamped
/// at zero.
pub fn pairwise_sqdist<T: Elem>(
    fh: &NormalizedFeatures<T>,
    gh: &NormalizedFeatures<T>,
) -> Result<Tensor<T>> {
    if fh.c() != gh.c() {
        return Err(Error::shape(
            "pairwise_sqdist",
            format!("C mismatch: {} vs {}", fh.c(), gh.c()),
        ));
    }
    let (k, c) = (fh.k(), fh.c());
    let kg = gh.k();
    let mut d = vec![T::zero(); k * kg];
    // -2 F G^T
    T::gemm_nt(k, c, kg, T::from_f64(-2.0), fh.rows.data(), gh.rows.data(), T::zero(), &mut d);
    let fsq: Vec<T> = (0..k)
        .map(|r| fh.rows.data()[r * c..(r + 1) * c].iter().map(|&v| v * v).sum())
        .collect();
    let gsq: Vec<T> = (0..kg)
        .map(|r| gh.rows.data()[r * c..(r + 1) * c].iter().map(|&v| v * v).sum())
        .collect();
    for r in 0..k {
        for j in 0..kg {
            let v = d[r * kg + j] + fsq[r] + gsq[j];
            d[r * kg + j] = if v > T::zero() { v } else { T::zero() };
        }
    }
    Ok(Tensor::from_vec(vec![k, kg], d))
}

fn check_tau<T: Elem>(tau: T) -> Result<()> {
    if tau <= T::zero() {
        return Err(Error::invalid("affinity", format!("tau = {tau} must be > 0")));
    }
    Ok(())
}

/// Query-to-target affinities: row softmax of -D/tau (max-shifted).
pub fn affinity_query_to_target<T: Elem>(d: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    check_tau(tau)?;
    let (k, kg) = (d.shape()[0], d.shape()[1]);
    let mut a = vec![T::zero(); k * kg];
    for r in 0..k {
        let row = &d.data()[r * kg..(r + 1) * kg];
        let m = row.iter().fold(T::infinity(), |acc, &v| acc.min(v));
        let mut sum = T::zero();
        for (o, &v) in a[r * kg..(r + 1) * kg].iter_mut().zip(row) {
            // logits are -D/tau; the max logit corresponds to the min distance
            *o = ((m - v) / tau).exp();
            sum += *o;
        }
        let inv = T::one() / sum;
        for o in &mut a[r * kg..(r + 1) * kg] {
            *o *= inv;
        }
    }
    Ok(Tensor::from_vec(vec![k, kg], a))
}

/// Target-to-query affinities: column softmax of -D/tau (max-shifted).
pub fn affinity_target_to_query<T: Elem>(d: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    check_tau(tau)?;
    let (k, kg) = (d.shape()[0], d.shape()[1]);
    let mut b = vec![T::zero(); k * kg];
    for j in 0..kg {
        let mut m = T::infinity();
        for r in 0..k {
            m = m.min(d.data()[r * kg + j]);
        }
        let mut sum = T::zero();
        for r in 0..k {
            let e = ((m - d.data()[r * kg + j]) / tau).exp();
            b[r * kg + j] = e;
            sum += e;
        }
        let inv = T::one() / sum;
        for r in 0..k {
            b[r * kg + j] *= inv;
        }
    }
    Ok(Tensor::from_vec(vec![k, kg], b))
}

/// Geometric mean of the two affinities, row-normalized.
pub fn joint_weights<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "joint_weights",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (k, kg) = (a.shape()[0], a.shape()[1]);
    let mut w = vec![T::zero(); k * kg];
    for r in 0..k {
        let mut sum = T::zero();
        for j in 0..kg {
            let v = (a.data()[r * kg + j] * b.data()[r * kg + j]).sqrt();
            w[r * kg + j] = v;
            sum += v;
        }
        if sum <= T::zero() {
            return Err(Error::DegenerateWeights);
        }
        let inv = T::one() / sum;
        for j in 0..kg {
            w[r * kg + j] *= inv;
        }
    }
    Ok(Tensor::from_vec(vec![k, kg], w))
}

/// V_tau = W Ghat - Fhat: residual from each query to its weighted centroid.
pub fn drift_tau<T: Elem>(
    w: &Tensor<T>,
    gh: &NormalizedFeatures<T>,
    fh: &NormalizedFeatures<T>,
) -> Tensor<T> {
    let (k, kg) = (w.shape()[0], w.shape()[1]);
    let c = gh.c();
    assert_eq!(kg, gh.k(), "drift_tau: W columns vs Ghat rows");
    assert_eq!(k, fh.k(), "drift_tau: W rows vs Fhat rows");
    let mut v = vec![T::zero(); k * c];
    T::gemm(k, kg, c, T::one(), w.data(), gh.rows.data(), T::zero(), &mut v);
    for (o, &f) in v.iter_mut().zip(fh.rows.data()) {
        *o -= f;
    }
    Tensor::from_vec(vec![k, c], v)
}

/// Mean squared row norm of a K x C field, in f64.
fn mean_sq_row_norm<T: Elem>(field: &Tensor<T>) -> f64 {
    let k = field.shape()[0];
    field.sq_sum_f64() / k as f64
}

/// Sum of per-temperature fields, each divided by its RMS row norm
/// sqrt(mean_k ||V_tau(f_k)||^2 + eps).
pub fn aggregate_drift<T: Elem>(fields: &[Tensor<T>], eps: T) -> Result<Tensor<T>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::invalid("aggregate_drift", "no fields"))?;
    if eps <= T::zero() {
        return Err(Error::invalid("aggregate_drift", "eps must be positive"));
    }
    let mut out = Tensor::zeros(first.shape().to_vec());
    for f in fields {
        if f.shape() != first.shape() {
            return Err(Error::shape(
                "aggregate_drift",
                format!("{:?} vs {:?}", f.shape(), first.shape()),
            ));
        }
        let denom = T::from_f64(mean_sq_row_norm(f)) + eps;
        let scale = T::one() / denom.sqrt();
        for (o, &v) in out.data_mut().iter_mut().zip(f.data()) {
            *o += v * scale;
        }
    }
    Ok(out)
}

/// Full drift-field computation, materializing the K x K weights per
/// temperature. Intended for inspection and tests; training uses
/// [`drift_update`].
pub fn drift_field<T: Elem>(
    fh: &NormalizedFeatures<T>,
    gh: &NormalizedFeatures<T>,
    params: &DriftParams<T>,
) -> Result<DriftFieldResult<T>> {
    let d = pairwise_sqdist(fh, gh)?;
    let mut temps = Vec::with_capacity(params.temps.len());
    for &tau in &params.temps {
        let a = affinity_query_to_target(&d, tau)?;
        let b = affinity_target_to_query(&d, tau)?;
        let w = joint_weights(&a, &b)?;
        let v = drift_tau(&w, gh, fh);
        temps.push(TempField { tau, weights: w, drift: v });
    }
    let fields: Vec<Tensor<T>> = temps.iter().map(|t| t.drift.clone()).collect();
    let aggregated = aggregate_drift(&fields, params.eps_agg)?;
    let loss = T::from_f64(mean_sq_row_norm(&aggregated));
    Ok(DriftFieldResult { temps, aggregated, loss })
}

/// Aggregated drift field without materializing K x K matrices: distances
/// are rebuilt per row block, with column log-sum-exps accumulated online.
/// Produces the same numbers as [`drift_field`] up to summation order.
pub fn drift_update<T: Elem>(
    fh: &NormalizedFeatures<T>,
    gh: &NormalizedFeatures<T>,
    params: &DriftParams<T>,
) -> Result<Tensor<T>> {
    let (k, c) = (fh.k(), fh.c());
    if gh.c() != c {
        return Err(Error::shape("drift_update", format!("C mismatch: {} vs {}", c, gh.c())));
    }
    let kg = gh.k();
    if k <= params.chunk_k {
        // Small instance: reuse the full path minus the weight matrices.
        let d = pairwise_sqdist(fh, gh)?;
        let mut fields = Vec::with_capacity(params.temps.len());
        for &tau in &params.temps {
            let a = affinity_query_to_target(&d, tau)?;
            let b = affinity_target_to_query(&d, tau)?;
            let w = joint_weights(&a, &b)?;
            fields.push(drift_tau(&w, gh, fh));
        }
        return aggregate_drift(&fields, params.eps_agg);
    }

    let block = params.chunk_k.max(1);
    let fsq: Vec<T> = (0..k)
        .map(|r| fh.rows.data()[r * c..(r + 1) * c].iter().map(|&v| v * v).sum())
        .collect();
    let gsq: Vec<T> = (0..kg)
        .map(|r| gh.rows.data()[r * c..(r + 1) * c].iter().map(|&v| v * v).sum())
        .collect();
    let dist_block = |r0: usize, rows: usize, d: &mut [T]| {
        T::gemm_nt(
            rows,
            c,
            kg,
            T::from_f64(-2.0),
            &fh.rows.data()[r0 * c..(r0 + rows) * c],
            gh.rows.data(),
            T::zero(),
            d,
        );
        for r in 0..rows {
            for j in 0..kg {
                let v = d[r * kg + j] + fsq[r0 + r] + gsq[j];
                d[r * kg + j] = if v > T::zero() { v } else { T::zero() };
            }
        }
    };

    let mut fields = Vec::with_capacity(params.temps.len());
    for &tau in &params.temps {
        // Pass 1: row log-sum-exp per row; online column log-sum-exp.
        let mut row_lse = vec![T::zero(); k];
        let mut col_max = vec![T::neg_infinity(); kg];
        let mut col_sum = vec![T::zero(); kg];
        let mut d = vec![T::zero(); block * kg];
        let mut r0 = 0;
        while r0 < k {
            let rows = block.min(k - r0);
            dist_block(r0, rows, &mut d);
            for r in 0..rows {
                let mut m = T::neg_infinity();
                for j in 0..kg {
                    let logit = -d[r * kg + j] / tau;
                    if logit > m {
                        m = logit;
                    }
                }
                let mut s = T::zero();
                for j in 0..kg {
                    let logit = -d[r * kg + j] / tau;
                    s += (logit - m).exp();
                    // online column accumulator
                    if logit > col_max[j] {
                        col_sum[j] = col_sum[j] * (col_max[j] - logit).exp() + T::one();
                        col_max[j] = logit;
                    } else {
                        col_sum[j] += (logit - col_max[j]).exp();
                    }
                }
                row_lse[r0 + r] = m + s.ln();
            }
            r0 += rows;
        }
        let col_lse: Vec<T> = col_max
            .iter()
            .zip(&col_sum)
            .map(|(&m, &s)| m + s.ln())
            .collect();

        // Pass 2: wtilde_kj = exp(logit - (row_lse_k + col_lse_j)/2),
        // V_k = (wtilde_k . Ghat) / rowsum_k - f_k.
        let mut v = vec![T::zero(); k * c];
        let mut wt = vec![T::zero(); block * kg];
        let half = T::from_f64(0.5);
        let mut r0 = 0;
        while r0 < k {
            let rows = block.min(k - r0);
            dist_block(r0, rows, &mut d);
            for r in 0..rows {
                let rl = row_lse[r0 + r];
                let mut sum = T::zero();
                for j in 0..kg {
                    let logit = -d[r * kg + j] / tau;
                    let e = (logit - (rl + col_lse[j]) * half).exp();
                    wt[r * kg + j] = e;
                    sum += e;
                }
                if sum <= T::zero() {
                    return Err(Error::DegenerateWeights);
                }
                let inv = T::one() / sum;
                for j in 0..kg {
                    wt[r * kg + j] *= inv;
                }
            }
            T::gemm(
                rows,
                kg,
                c,
                T::one(),
                &wt[..rows * kg],
                gh.rows.data(),
                T::zero(),
                &mut v[r0 * c..(r0 + rows) * c],
            );
            r0 += rows;
        }
        for (o, &f) in v.iter_mut().zip(fh.rows.data()) {
            *o -= f;
        }
        fields.push(Tensor::from_vec(vec![k, c], v));
    }
    aggregate_drift(&fields, params.eps_agg)
}

/// Forward value of the drift loss for one aligned pyramid pair:
/// (1/|L|) sum_l (1/K_l) sum_k ||V(f_k)||^2.
pub fn drift_loss_value<T: Elem>(
    pyr_recon: &crate::features::FeaturePyramid<T>,
    pyr_gt: &crate::features::FeaturePyramid<T>,
    params: &DriftParams<T>,
) -> Result<f64> {
    if pyr_recon.levels.len() != pyr_gt.levels.len() {
        return Err(Error::shape("drift_loss", "pyramids have different depths"));
    }
    let mut total = 0.0;
    for (lr, lg) in pyr_recon.levels.iter().zip(&pyr_gt.levels) {
        if lr.features.shape() != lg.features.shape() {
            return Err(Error::shape(
                "drift_loss",
                format!("layer {}: {:?} vs {:?}", lr.name, lr.features.shape(), lg.features.shape()),
            ));
        }
        let f = to_rows(&lr.features);
        let g = to_rows(&lg.features);
        let fh = normalize_rows(&f, params.eps_norm)?;
        let gh = normalize_rows(&g, params.eps_norm)?;
        let v = drift_update(&fh, &gh, params)?;
        total += mean_sq_row_norm(&v);
    }
    Ok(total / pyr_recon.levels.len() as f64)
}

/// (C, H, W) feature map to a (K, C) row matrix of spatial locations.
pub fn to_rows<T: Elem>(features: &Tensor<T>) -> Tensor<T> {
    let s = features.shape();
    assert_eq!(s.len(), 3, "to_rows expects CHW");
    let (c, k) = (s[0], s[1] * s[2]);
    let mut out = vec![T::zero(); k * c];
    for ci in 0..c {
        for p in 0..k {
            out[p * c + ci] = features.data()[ci * k + p];
        }
    }
    Tensor::from_vec(vec![k, c], out)
}

/// Per-batch drift loss wired into the tape with a frozen target.
///
/// `recon_layers` are batched (B, C, H, W) feature vars on `g`;
/// `gt_layers` are the matching frozen values. Returns the scalar loss node
/// (batch mean) and the per-image loss values for logging.
pub fn batched_drift_loss<T: Elem>(
    g: &mut Graph<T>,
    recon_layers: &[Var],
    gt_layers: &[Tensor<T>],
    params: &DriftParams<T>,
) -> Result<(Var, Vec<f64>)> {
    assert_eq!(recon_layers.len(), gt_layers.len());
    let n_layers = recon_layers.len();
    let batch = g.value(recon_layers[0]).shape()[0];
    let mut layer_nodes = Vec::with_capacity(n_layers);
    let mut per_image = vec![0.0f64; batch];
    for (&rv, gt) in recon_layers.iter().zip(gt_layers) {
        let rshape = g.value(rv).shape().to_vec();
        if rshape != gt.shape() {
            return Err(Error::shape(
                "batched_drift_loss",
                format!("recon {:?} vs gt {:?}", rshape, gt.shape()),
            ));
        }
        let (b, c, h, w) = (rshape[0], rshape[1], rshape[2], rshape[3]);
        let k = h * w;
        let fkc = g.nchw_to_nkc(rv);
        let fhat = g.l2_normalize_rows(fkc, params.eps_norm);
        let fhat_vals = g.value(fhat).clone();
        // Ground-truth rows, normalized outside the tape.
        let gt_rows: Vec<Tensor<T>> = (0..b)
            .map(|n| to_rows(&gt.reshaped(vec![b, c, h, w]).slice_image(n)))
            .collect();
        // Per-image drift fields; ordered collect keeps reduction deterministic.
        let results: Vec<Result<(Vec<T>, f64)>> = (0..b)
            .into_par_iter()
            .map(|n| {
                let f_img = Tensor::from_vec(
                    vec![k, c],
                    fhat_vals.data()[n * k * c..(n + 1) * k * c].to_vec(),
                );
                let fh = NormalizedFeatures { rows: f_img, epsilon: params.eps_norm };
                let gh = normalize_rows(&gt_rows[n], params.eps_norm)?;
                let v = drift_update(&fh, &gh, params)?;
                let loss = mean_sq_row_norm(&v);
                let mut target = fh.rows.data().to_vec();
                for (t, &d) in target.iter_mut().zip(v.data()) {
                    *t += d;
                }
                Ok((target, loss))
            })
            .collect();
        let mut target = vec![T::zero(); b * k * c];
        for (n, res) in results.into_iter().enumerate() {
            let (t, loss) = res?;
            target[n * k * c..(n + 1) * k * c].copy_from_slice(&t);
            per_image[n] += loss / n_layers as f64;
        }
        let target = Tensor::from_vec(vec![b, k, c], target);
        let scale = T::from_f64(1.0 / (b * n_layers * k) as f64);
        layer_nodes.push(g.sq_diff_sum(fhat, &target, scale));
    }
    let terms: Vec<(Var, T)> = layer_nodes.into_iter().map(|v| (v, T::one())).collect();
    Ok((g.weighted_sum_scalars(&terms), per_image))
}

impl<T: Elem> Tensor<T> {
    /// View image `n` of an NCHW batch as a CHW tensor (copies).
    pub fn slice_image(&self, n: usize) -> Tensor<T> {
        let s = self.shape();
        assert_eq!(s.len(), 4);
        let img = s[1] * s[2] * s[3];
        Tensor::from_vec(vec![s[1], s[2], s[3]], self.data()[n * img..(n + 1) * img].to_vec())
    }
}

pub mod oracle {
    //! Naive per-candidate-set reimplementation in f64 used by tests.
    //!
    //! Follows the candidate-set definitions literally: for every query k the
    //! candidate list is the positive g_k followed by the negatives g_j, j != k,
    //! with explicit loops and no shared code with the vectorized path.

    use super::DriftParams;
    use crate::error::{Error, Result};
    use crate::tensor::{Elem, Tensor};

    pub const K_MAX: usize = 64;
    pub const C_MAX: usize = 64;

    #[derive(Debug, Clone)]
    pub struct OracleField {
        pub tau: f64,
        /// Row-stochastic weights indexed [query][target].
        pub weights: Vec<Vec<f64>>,
        /// Drift vectors indexed [query][channel].
        pub drift: Vec<Vec<f64>>,
    }

    #[derive(Debug, Clone)]
    pub struct OracleResult {
        pub temps: Vec<OracleField>,
        pub aggregated: Vec<Vec<f64>>,
        pub loss: f64,
    }

    fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            let d = a[i] - b[i];
            s += d * d;
        }
        s
    }

    /// Drift field on raw K x C matrices, normalizing rows first.
    pub fn drift_oracle<T: Elem>(
        f: &Tensor<T>,
        g: &Tensor<T>,
        params: &DriftParams<T>,
    ) -> Result<OracleResult> {
        let (k, c) = (f.shape()[0], f.shape()[1]);
        if g.shape() != [k, c] {
            return Err(Error::shape("drift_oracle", format!("{:?} vs {:?}", f.shape(), g.shape())));
        }
        if k > K_MAX || c > C_MAX {
            return Err(Error::OracleLimit { k, c, k_max: K_MAX, c_max: C_MAX });
        }
        let eps = params.eps_norm.as_f64();
        let normalize = |m: &Tensor<T>| -> Vec<Vec<f64>> {
            (0..k)
                .map(|r| {
                    let row: Vec<f64> = (0..c).map(|i| m.data()[r * c + i].as_f64()).collect();
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.iter().map(|v| v / (norm + eps)).collect()
                })
                .collect()
        };
        let fh = normalize(f);
        let gh = normalize(g);

        let mut temps = Vec::new();
        for &tau_t in &params.temps {
            let tau = tau_t.as_f64();
            // a(k, y): softmax over the candidate set of query k.
            let mut a = vec![vec![0.0; k]; k];
            for q in 0..k {
                // candidate list: positive g_q first, then negatives in index order
                let mut cand: Vec<usize> = vec![q];
                cand.extend((0..k).filter(|&j| j != q));
                let logits: Vec<f64> = cand
                    .iter()
                    .map(|&j| -sq_dist(&fh[q], &gh[j]) / tau)
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
                for (pos, &j) in cand.iter().enumerate() {
                    a[q][j] = (logits[pos] - m).exp() / z;
                }
            }
            // b(f_k, y): softmax over all queries for each fixed target y.
            let mut b = vec![vec![0.0; k]; k];
            for t in 0..k {
                let logits: Vec<f64> = (0..k).map(|q| -sq_dist(&fh[q], &gh[t]) / tau).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
                for q in 0..k {
                    b[q][t] = (logits[q] - m).exp() / z;
                }
            }
            // geometric mean, renormalized per query
            let mut w = vec![vec![0.0; k]; k];
            for q in 0..k {
                let mut sum = 0.0;
                for t in 0..k {
                    w[q][t] = (a[q][t] * b[q][t]).sqrt();
                    sum += w[q][t];
                }
                if sum <= 0.0 {
                    return Err(Error::DegenerateWeights);
                }
                for t in 0..k {
                    w[q][t] /= sum;
                }
            }
            // drift: weighted centroid minus query
            let mut v = vec![vec![0.0; c]; k];
            for q in 0..k {
                for t in 0..k {
                    for i in 0..c {
                        v[q][i] += w[q][t] * gh[t][i];
                    }
                }
                for i in 0..c {
                    v[q][i] -= fh[q][i];
                }
            }
            temps.push(OracleField { tau, weights: w, drift: v });
        }

        // per-temperature RMS normalization, then sum
        let eps_agg = params.eps_agg.as_f64();
        let mut aggregated = vec![vec![0.0; c]; k];
        for field in &temps {
            let mut msq = 0.0;
            for q in 0..k {
                for i in 0..c {
                    msq += field.drift[q][i] * field.drift[q][i];
                }
            }
            msq /= k as f64;
            let scale = 1.0 / (msq + eps_agg).sqrt();
            for q in 0..k {
                for i in 0..c {
                    aggregated[q][i] += field.drift[q][i] * scale;
                }
            }
        }
        let mut loss = 0.0;
        for row in &aggregated {
            for &v in row {
                loss += v * v;
            }
        }
        loss /= k as f64;
        Ok(OracleResult { temps, aggregated, loss })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_pair() -> (NormalizedFeatures<f64>, NormalizedFeatures<f64>) {
        // f1=(1,0), f2=(0,1); g identical => D = [[0,2],[2,0]]
        let f = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let fh = normalize_rows(&f, 1e-12).unwrap();
        (fh.clone(), fh)
    }

    #[test]
    fn normalize_rows_345_triangle() {
        let f = Tensor::<f64>::from_vec(vec![1, 2], vec![3.0, 4.0]);
        let nf = normalize_rows(&f, 1e-12).unwrap();
        assert!((nf.rows().data()[0] - 0.6).abs() < 1e-9);
        assert!((nf.rows().data()[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn normalize_rows_zero_row_stays_zero() {
        let f = Tensor::<f64>::from_vec(vec![1, 2], vec![0.0, 0.0]);
        let nf = normalize_rows(&f, 1e-8).unwrap();
        assert_eq!(nf.rows().data(), &[0.0, 0.0]);
    }

    #[test]
    fn pairwise_distances_identity_orthogonal_antipodal() {
        let f = Tensor::<f64>::from_vec(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
        let fh = normalize_rows(&f, 1e-12).unwrap();
        let d = pairwise_sqdist(&fh, &fh).unwrap();
        assert!(d.data()[0].abs() < 1e-12); // identical
        assert!((d.data()[1] - 2.0).abs() < 1e-9); // orthogonal
        assert!((d.data()[2] - 4.0).abs() < 1e-9); // antipodal
    }

    #[test]
    fn affinity_rows_match_scalar_softmax() {
        let d = Tensor::<f64>::from_vec(vec![2, 2], vec![0.0, 2.0, 2.0, 0.0]);
        let a = affinity_query_to_target(&d, 1.0).unwrap();
        assert!((a.data()[0] - 0.8808).abs() < 1e-3);
        assert!((a.data()[1] - 0.1192).abs() < 1e-3);
        // constant row => uniform
        let dc = Tensor::<f64>::from_vec(vec![1, 4], vec![3.0; 4]);
        let ac = affinity_query_to_target(&dc, 0.7).unwrap();
        for &v in ac.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn column_softmax_is_transposed_row_softmax() {
        let d = Tensor::<f64>::from_vec(vec![2, 2], vec![0.1, 1.4, 0.9, 0.3]);
        let b = affinity_target_to_query(&d, 0.5).unwrap();
        let dt = Tensor::<f64>::from_vec(vec![2, 2], vec![0.1, 0.9, 1.4, 0.3]);
        let at = affinity_query_to_target(&dt, 0.5).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((b.data()[r * 2 + c] - at.data()[c * 2 + r]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn golden_joint_weights_and_drift() {
        let (fh, gh) = unit_pair();
        let d = pairwise_sqdist(&fh, &gh).unwrap();
        let a = affinity_query_to_target(&d, 1.0).unwrap();
        let b = affinity_target_to_query(&d, 1.0).unwrap();
        let w = joint_weights(&a, &b).unwrap();
        assert!((w.data()[0] - 0.8808).abs() < 1e-3);
        assert!((w.data()[1] - 0.1192).abs() < 1e-3);
        let v = drift_tau(&w, &gh, &fh);
        assert!((v.data()[0] - (-0.1192)).abs() < 1e-3);
        assert!((v.data()[1] - 0.1192).abs() < 1e-3);
    }

    #[test]
    fn single_candidate_weight_is_one() {
        let f = Tensor::<f64>::from_vec(vec![1, 3], vec![0.2, -0.4, 0.9]);
        let g = Tensor::<f64>::from_vec(vec![1, 3], vec![-0.7, 0.1, 0.1]);
        let fh = normalize_rows(&f, 1e-8).unwrap();
        let gh = normalize_rows(&g, 1e-8).unwrap();
        let params = DriftParams { temps: vec![0.2], ..Default::default() };
        let res = drift_field(&fh, &gh, &params).unwrap();
        assert_eq!(res.temps[0].weights.data(), &[1.0]);
        // V = g - f for K = 1
        for i in 0..3 {
            let expect = gh.rows().data()[i] - fh.rows().data()[i];
            assert!((res.temps[0].drift.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_self_normalizes() {
        // single temperature, RMS row norm r >> sqrt(eps) => aggregated RMS ~ 1
        let v = Tensor::<f64>::from_vec(vec![2, 2], vec![3.0, 0.0, 0.0, 4.0]);
        let agg = aggregate_drift(&[v], 1e-8).unwrap();
        let rms = (agg.sq_sum_f64() / 2.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-3);
        // zero field stays zero
        let z = Tensor::<f64>::zeros(vec![2, 2]);
        let aggz = aggregate_drift(&[z], 1e-8).unwrap();
        assert_eq!(aggz.data(), &[0.0; 4]);
        // two identical fields double the normalized field
        let v1 = Tensor::<f64>::from_vec(vec![2, 2], vec![3.0, 0.0, 0.0, 4.0]);
        let agg2 = aggregate_drift(&[v1.clone(), v1], 1e-8).unwrap();
        for (x, y) in agg2.data().iter().zip(agg.data()) {
            assert!((x - 2.0 * y).abs() < 1e-9);
        }
    }

    #[test]
    fn drift_field_matches_oracle_small() {
        use crate::rng::{stream, Domain};
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = stream(42, Domain::Test, 77, 0);
        let (k, c) = (5, 3);
        let data = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            (0..k * c).map(|_| StandardNormal.sample(rng)).collect()
        };
        let f = Tensor::from_vec(vec![k, c], data(&mut rng));
        let g = Tensor::from_vec(vec![k, c], data(&mut rng));
        let params = DriftParams::default();
        let fh = normalize_rows(&f, params.eps_norm).unwrap();
        let gh = normalize_rows(&g, params.eps_norm).unwrap();
        let got = drift_field(&fh, &gh, &params).unwrap();
        let want = oracle::drift_oracle(&f, &g, &params).unwrap();
        for (tf, of) in got.temps.iter().zip(&want.temps) {
            for q in 0..k {
                for t in 0..k {
                    assert!((tf.weights.data()[q * k + t] - of.weights[q][t]).abs() < 1e-9);
                }
            }
        }
        assert!((got.loss - want.loss).abs() < 1e-9);
    }

    #[test]
    fn oracle_rejects_large_instances() {
        let f = Tensor::<f64>::zeros(vec![65, 2]);
        let g = Tensor::<f64>::zeros(vec![65, 2]);
        assert!(matches!(
            oracle::drift_oracle(&f, &g, &DriftParams::default()),
            Err(Error::OracleLimit { .. })
        ));
    }
}
