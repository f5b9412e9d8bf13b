// Text-side encoding: a stand-in text tower emitting unit vectors in the
// backbone's output space, plus the ensembling rule that folds several
// prompt fillings into one query. Ensembling averages the normalized
// per-prompt embeddings and renormalizes, so the result stays unit-norm.

import { Backbone } from './backbone.js';
import { PackRecord } from './pack.js';
import { fillTemplate } from './prompts.js';
import { Rng } from './rand.js';

function normalize(v: Float64Array): Float64Array {
  let sq = 0;
  for (const x of v) sq += x * x;
  const norm = Math.sqrt(sq);
  if (norm === 0) throw new Error('cannot normalize a zero vector');
  for (let i = 0; i < v.length; i++) v[i] /= norm;
  return v;
}

export class TextTower {
  constructor(readonly backbone: Backbone) {}

  /** Unit embedding for one exact prompt string. */
  encode(text: string): Float64Array {
    if (!text) throw new Error('cannot encode empty text');
    const v = Rng.from('text-tower', this.backbone.name, text).normals(this.backbone.spec.outDim);
    return normalize(v);
  }
}

export function ensembleQuery(tower: TextTower, name: string, templates: readonly string[]): Float64Array {
  if (templates.length === 0) throw new Error('no prompt templates');
  const dim = tower.backbone.spec.outDim;
  const mean = new Float64Array(dim);
  for (const template of templates) {
    const v = tower.encode(fillTemplate(template, name));
    for (let d = 0; d < dim; d++) mean[d] += v[d];
  }
  for (let d = 0; d < dim; d++) mean[d] /= templates.length;
  return normalize(mean);
}

/** One single-vector record per category, id carrying the category name. */
export function buildQueryRecords(
  names: readonly string[],
  tower: TextTower,
  templates: readonly string[],
): PackRecord[] {
  if (names.length === 0) throw new Error('empty category list');
  const dim = tower.backbone.spec.outDim;
  return names.map((name) => {
    if (!name.trim()) throw new Error('blank category name');
    return {
      imageId: name,
      gridH: 1,
      gridW: 1,
      method: 'dense' as const,
      vectors: Float32Array.from(ensembleQuery(tower, name, templates)),
      channels: dim,
    };
  });
}
