//! Vector-quantization bottleneck.
//!
//! Nearest-neighbor assignment against a codebook, the codebook (VQ) and
//! commitment losses with their stop-gradient placements, straight-through
//! routing into the decoder, and usage diagnostics. Both losses share one
//! forward value — mean over rows of the summed squared per-dim distance —
//! and differ only in where the gradient flows.

use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, GraphError, NodeId, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum VqError {
    #[error("codebook dimension {codebook} does not match input dimension {input}")]
    DimensionMismatch { codebook: usize, input: usize },
    #[error("code index {index} out of range for codebook of size {k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("input must be a non-empty [n, d] matrix")]
    BadInput,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    Local,
    Global,
}

/// A `k x d` table of codewords.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    kind: CodebookKind,
}

impl Codebook {
    pub fn new(entries: Tensor, kind: CodebookKind) -> Result<Self, VqError> {
        if entries.shape().len() != 2 {
            return Err(VqError::BadInput);
        }
        Ok(Self { entries, kind })
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn kind(&self) -> CodebookKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.rows()
    }

    pub fn is_empty(&self) -> bool {
        false // k >= 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn codeword(&self, index: usize) -> &[f64] {
        self.entries.row(index)
    }
}

/// Output of quantizing `n` rows against a codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub z_e: Tensor,
    pub indices: Vec<usize>,
    pub z_q: Tensor,
    /// Forward value of the codebook loss (equals `commit_loss`).
    pub vq_loss: f64,
    /// Forward value of the commitment loss (equals `vq_loss`).
    pub commit_loss: f64,
}

/// Nearest codeword per row under squared Euclidean distance; ties break
/// to the lowest index.
pub fn nearest_indices(z_e: &Tensor, codebook: &Codebook) -> Result<Vec<usize>, VqError> {
    if z_e.shape().len() != 2 {
        return Err(VqError::BadInput);
    }
    let d = z_e.cols();
    if d != codebook.dim() {
        return Err(VqError::DimensionMismatch {
            codebook: codebook.dim(),
            input: d,
        });
    }
    let mut indices = Vec::with_capacity(z_e.rows());
    for r in 0..z_e.rows() {
        let row = z_e.row(r);
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for k in 0..codebook.len() {
            let cw = codebook.codeword(k);
            let mut dist = 0.0;
            for (a, b) in row.iter().zip(cw) {
                let diff = a - b;
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        indices.push(best);
    }
    Ok(indices)
}

/// Quantize `z_e` (`[n, d]`) against a codebook: indices, selected
/// codewords, and the shared forward loss value.
pub fn quantize(z_e: &Tensor, codebook: &Codebook) -> Result<QuantizationResult, VqError> {
    let indices = nearest_indices(z_e, codebook)?;
    let d = codebook.dim();
    let n = z_e.rows();
    let mut zq = Vec::with_capacity(n * d);
    for &i in &indices {
        zq.extend_from_slice(codebook.codeword(i));
    }
    let z_q = Tensor::new(vec![n, d], zq)?;
    let loss = mean_row_sq_dist(z_e, &z_q);
    Ok(QuantizationResult {
        z_e: z_e.clone(),
        indices,
        z_q,
        vq_loss: loss,
        commit_loss: loss,
    })
}

/// Mean over rows, sum over dims of the squared difference.
fn mean_row_sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows() as f64;
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum();
    total / n
}

/// Loss nodes for one quantization inside a graph.
pub struct VqNodes {
    /// Straight-through quantized output: value is `z_q`, gradient flows
    /// to `z_e` unchanged.
    pub straight_through: NodeId,
    /// `‖sg[z_e] - e‖²` (mean over rows): gradient reaches only the codebook.
    pub vq_loss: NodeId,
    /// `‖z_e - sg[e]‖²` (mean over rows): gradient reaches only `z_e`.
    pub commit_loss: NodeId,
    pub indices: Vec<usize>,
}

/// Wire a quantization into `graph`: chooses indices from the forward
/// values of `z_e`, then builds both loss terms and the straight-through
/// path against the live codebook node so gradients land correctly.
pub fn quantize_in_graph(
    graph: &mut Graph,
    z_e: NodeId,
    codebook_node: NodeId,
    codebook: &Codebook,
) -> Result<VqNodes, VqError> {
    let result = quantize(graph.value(z_e), codebook)?;
    let n = result.indices.len();
    let inv_n = 1.0 / n as f64;

    let selected = graph.gather_rows(codebook_node, &result.indices)?;

    // ‖sg[z_e] - e‖²: z_e enters as a constant.
    let ze_const = graph.stop_grad(z_e)?;
    let d1 = graph.sub(ze_const, selected)?;
    let sq1 = graph.mul(d1, d1)?;
    let s1 = graph.sum_all(sq1)?;
    let vq_loss = graph.scale(s1, inv_n)?;

    // ‖z_e - sg[e]‖²: the selected codewords enter as constants.
    let sel_const = graph.stop_grad(selected)?;
    let d2 = graph.sub(z_e, sel_const)?;
    let sq2 = graph.mul(d2, d2)?;
    let s2 = graph.sum_all(sq2)?;
    let commit_loss = graph.scale(s2, inv_n)?;

    let straight_through = graph.straight_through(z_e, result.z_q.clone())?;

    Ok(VqNodes {
        straight_through,
        vq_loss,
        commit_loss,
        indices: result.indices,
    })
}

/// Usage histogram over a dataset's code indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub histogram: Vec<u64>,
    pub used: usize,
    /// `exp(entropy)` of the normalized histogram, in `[1, k]`.
    pub perplexity: f64,
    pub collapsed: bool,
}

pub fn codebook_stats(indices: &[usize], k: usize) -> Result<CodebookStats, VqError> {
    let mut histogram = vec![0u64; k];
    for &i in indices {
        if i >= k {
            return Err(VqError::IndexOutOfRange { index: i, k });
        }
        histogram[i] += 1;
    }
    let total: u64 = histogram.iter().sum();
    let used = histogram.iter().filter(|&&c| c > 0).count();
    let perplexity = if total == 0 {
        1.0
    } else {
        let mut entropy = 0.0;
        for &c in &histogram {
            if c > 0 {
                let p = c as f64 / total as f64;
                entropy -= p * p.ln();
            }
        }
        entropy.exp()
    };
    Ok(CodebookStats {
        histogram,
        used,
        perplexity,
        collapsed: used == 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Padding;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cb(rows: Vec<Vec<f64>>) -> Codebook {
        let k = rows.len();
        let d = rows[0].len();
        let data = rows.into_iter().flatten().collect();
        Codebook::new(Tensor::new(vec![k, d], data).unwrap(), CodebookKind::Local).unwrap()
    }

    #[test]
    fn picks_nearest_codeword() {
        let codebook = cb(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let z = Tensor::matrix(1, 2, vec![0.2, 0.2]).unwrap();
        let r = quantize(&z, &codebook).unwrap();
        assert_eq!(r.indices, vec![0]);
        assert_eq!(r.z_q.data(), &[0.0, 0.0]);
    }

    #[test]
    fn exact_match_has_zero_loss() {
        let codebook = cb(vec![
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.5, -0.5],
        ]);
        let z = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
        let r = quantize(&z, &codebook).unwrap();
        assert_eq!(r.indices, vec![3]);
        assert_eq!(r.vq_loss, 0.0);
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        let codebook = cb(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let z = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let r = quantize(&z, &codebook).unwrap();
        assert_eq!(r.indices, vec![0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let codebook = cb(vec![vec![0.0, 0.0]]);
        let z = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            quantize(&z, &codebook),
            Err(VqError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn loss_value_mean_rows_sum_dims() {
        // single row [1,0] vs codeword [0,0]: (1-0)^2 + 0 = 1.0
        let codebook = cb(vec![vec![0.0, 0.0], vec![9.0, 9.0]]);
        let z = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let r = quantize(&z, &codebook).unwrap();
        assert_eq!(r.vq_loss, 1.0);
        assert_eq!(r.commit_loss, 1.0);
    }

    #[test]
    fn vq_loss_gradient_reaches_only_codebook() {
        let codebook = cb(vec![vec![0.0, 0.0], vec![9.0, 9.0]]);
        let mut g = Graph::new();
        let ze = g.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let cbn = g.leaf(codebook.entries().clone());
        let nodes = quantize_in_graph(&mut g, ze, cbn, &codebook).unwrap();
        g.backward(nodes.vq_loss).unwrap();
        assert_eq!(g.grad(ze), &[0.0, 0.0]);
        // d/de of (z-e)^2 = -2(z-e)/n on the selected row only
        assert_eq!(g.grad(cbn), &[-2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn commit_loss_gradient_reaches_only_encoder() {
        let codebook = cb(vec![vec![0.0, 0.0], vec![9.0, 9.0]]);
        let mut g = Graph::new();
        let ze = g.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let cbn = g.leaf(codebook.entries().clone());
        let nodes = quantize_in_graph(&mut g, ze, cbn, &codebook).unwrap();
        g.backward(nodes.commit_loss).unwrap();
        // 2*(z-e)/n = 2*[1,0]/1
        assert_eq!(g.grad(ze), &[2.0, 0.0]);
        assert_eq!(g.grad(cbn), &[0.0; 4]);
    }

    #[test]
    fn straight_through_forwards_zq_and_routes_grad_to_ze() {
        let codebook = cb(vec![vec![0.25, -0.75], vec![9.0, 9.0]]);
        let mut g = Graph::new();
        let ze = g.leaf(Tensor::matrix(2, 2, vec![0.3, -0.6, 0.1, -0.9]).unwrap());
        let cbn = g.leaf(codebook.entries().clone());
        let nodes = quantize_in_graph(&mut g, ze, cbn, &codebook).unwrap();
        let st = nodes.straight_through;
        assert_eq!(g.value(st).data(), &[0.25, -0.75, 0.25, -0.75]);
        let loss = g.mean_all(st).unwrap();
        g.backward(loss).unwrap();
        // d(loss)/d(z_q) is uniform 1/4; straight-through hands it to z_e.
        assert_eq!(g.grad(ze), &[0.25; 4]);
        assert_eq!(g.grad(cbn), &[0.0; 4]);
    }

    #[test]
    fn reconstruction_grad_reaches_encoder_despite_argmin() {
        // end-to-end: conv encoder -> quantize -> straight-through -> loss
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let entries = Tensor::fan_in_uniform(&mut rng, vec![4, 3], 3);
        let codebook = Codebook::new(entries, CodebookKind::Local).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::fan_in_uniform(&mut rng, vec![1, 12], 1));
        let w = g.leaf(Tensor::fan_in_uniform(&mut rng, vec![3, 1, 4], 4));
        let b = g.leaf(Tensor::fan_in_uniform(&mut rng, vec![3], 4));
        let h = g.conv1d(x, w, b, 4, Padding::Same).unwrap();
        let frames = g.transpose(h).unwrap();
        let cbn = g.leaf(codebook.entries().clone());
        let nodes = quantize_in_graph(&mut g, frames, cbn, &codebook).unwrap();
        let sq = g.mul(nodes.straight_through, nodes.straight_through).unwrap();
        let loss = g.mean_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).iter().any(|&v| v != 0.0));
        assert!(g.grad(b).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stats_collapse_and_uniform() {
        let s = codebook_stats(&[7; 50], 16).unwrap();
        assert_eq!(s.used, 1);
        assert_eq!(s.perplexity, 1.0);
        assert!(s.collapsed);

        let all: Vec<usize> = (0..16).collect();
        let s = codebook_stats(&all, 16).unwrap();
        assert_eq!(s.used, 16);
        assert!((s.perplexity - 16.0).abs() < 1e-12);
        assert!(!s.collapsed);
    }

    #[test]
    fn stats_hand_histogram() {
        let s = codebook_stats(&[0, 0, 1, 1], 4).unwrap();
        assert_eq!(s.histogram, vec![2, 2, 0, 0]);
        assert_eq!(s.used, 2);
        assert!((s.perplexity - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stats_reject_out_of_range() {
        assert!(matches!(
            codebook_stats(&[4], 4),
            Err(VqError::IndexOutOfRange { .. })
        ));
    }

    proptest! {
        /// Brute-force check: chosen codeword is never farther than any other,
        /// losses agree exactly, and re-quantizing z_q is idempotent.
        #[test]
        fn quantize_against_brute_force(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(1..9usize);
            let d = rng.gen_range(1..5usize);
            let n = rng.gen_range(1..7usize);
            let entries = Tensor::new(
                vec![k, d],
                (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ).unwrap();
            let codebook = Codebook::new(entries, CodebookKind::Local).unwrap();
            let z = Tensor::new(
                vec![n, d],
                (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ).unwrap();
            let r = quantize(&z, &codebook).unwrap();

            prop_assert_eq!(r.vq_loss, r.commit_loss);
            for i in 0..n {
                let zi = z.row(i);
                let chosen = r.z_q.row(i);
                let chosen_dist: f64 = zi.iter().zip(chosen).map(|(a, b)| (a - b) * (a - b)).sum();
                for kk in 0..k {
                    let other: f64 = zi
                        .iter()
                        .zip(codebook.codeword(kk))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    prop_assert!(chosen_dist <= other);
                }
                prop_assert_eq!(chosen, codebook.codeword(r.indices[i]));
            }

            let again = quantize(&r.z_q, &codebook).unwrap();
            prop_assert_eq!(again.indices, r.indices);
        }

        #[test]
        fn perplexity_bounds(indices in proptest::collection::vec(0usize..8, 1..200)) {
            let s = codebook_stats(&indices, 8).unwrap();
            prop_assert!(s.perplexity >= 1.0 - 1e-12);
            prop_assert!(s.perplexity <= 8.0 + 1e-12);
            prop_assert_eq!(s.collapsed, s.used == 1);
        }
    }
}
