// Attention pooling and its per-location reformulation. The pooled path
// runs multi-head attention with the query taken from the mean feature.
// The dense path applies the same value and output projections (weights
// and biases both, query/key paths dropped) independently at every
// location; because affine maps commute with averaging, the uniform-
// attention pool of a grid equals the mean of its dense projections, which
// extraction exposes as a self-check.

import { PoolWeights } from './backbone.js';

function affine(w: Float64Array, b: Float64Array, rows: number, cols: number, x: Float64Array, xOff: number, out: Float64Array, outOff: number): void {
  for (let r = 0; r < rows; r++) {
    let acc = b[r];
    const base = r * cols;
    for (let c = 0; c < cols; c++) acc += w[base + c] * x[xOff + c];
    out[outOff + r] = acc;
  }
}

/** Project every location into the pooled output space: nLoc x outDim. */
export function denseProject(feat: Float64Array, nLoc: number, w: PoolWeights): Float64Array {
  const { heads, headDim, embedDim, outDim } = w;
  const concat = new Float64Array(heads * headDim);
  const out = new Float64Array(nLoc * outDim);
  for (let l = 0; l < nLoc; l++) {
    for (let h = 0; h < heads; h++) {
      affine(w.valueW[h], w.valueB[h], headDim, embedDim, feat, l * embedDim, concat, h * headDim);
    }
    affine(w.outW, w.outB, outDim, heads * headDim, concat, 0, out, l * outDim);
  }
  return out;
}

export interface PoolOptions {
  /** Replace softmax weights with 1/n (the dense-mean self-check path). */
  uniform?: boolean;
}

/** Pool a feature grid to one outDim vector via mean-query attention. */
export function attentionPool(feat: Float64Array, nLoc: number, w: PoolWeights, opts: PoolOptions = {}): Float64Array {
  const { heads, headDim, embedDim, outDim } = w;
  if (nLoc < 1) throw new Error('cannot pool an empty grid');
  const mean = new Float64Array(embedDim);
  for (let l = 0; l < nLoc; l++) {
    for (let d = 0; d < embedDim; d++) mean[d] += feat[l * embedDim + d];
  }
  for (let d = 0; d < embedDim; d++) mean[d] /= nLoc;

  const concat = new Float64Array(heads * headDim);
  const q = new Float64Array(headDim);
  const k = new Float64Array(headDim);
  const v = new Float64Array(headDim);
  const logits = new Float64Array(nLoc);
  const invSqrt = 1 / Math.sqrt(headDim);
  for (let h = 0; h < heads; h++) {
    let alphas: Float64Array;
    if (opts.uniform) {
      alphas = new Float64Array(nLoc).fill(1 / nLoc);
    } else {
      affine(w.queryW[h], w.queryB[h], headDim, embedDim, mean, 0, q, 0);
      let maxLogit = -Infinity;
      for (let l = 0; l < nLoc; l++) {
        affine(w.keyW[h], w.keyB[h], headDim, embedDim, feat, l * embedDim, k, 0);
        let dot = 0;
        for (let d = 0; d < headDim; d++) dot += q[d] * k[d];
        logits[l] = dot * invSqrt;
        if (logits[l] > maxLogit) maxLogit = logits[l];
      }
      alphas = new Float64Array(nLoc);
      let total = 0;
      for (let l = 0; l < nLoc; l++) {
        alphas[l] = Math.exp(logits[l] - maxLogit);
        total += alphas[l];
      }
      for (let l = 0; l < nLoc; l++) alphas[l] /= total;
    }
    const pooled = concat.subarray(h * headDim, (h + 1) * headDim);
    pooled.fill(0);
    for (let l = 0; l < nLoc; l++) {
      affine(w.valueW[h], w.valueB[h], headDim, embedDim, feat, l * embedDim, v, 0);
      for (let d = 0; d < headDim; d++) pooled[d] += alphas[l] * v[d];
    }
  }
  const out = new Float64Array(outDim);
  affine(w.outW, w.outB, outDim, heads * headDim, concat, 0, out, 0);
  return out;
}
