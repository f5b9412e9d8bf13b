// Stand-in vision backbones. The real checkpoints behind these names are
// multi-GB downloads needing a GPU runtime, so this module keeps their
// interface geometry (patch stride, native grid, attention-pool head
// layout) over a seeded random parameterization at reduced channel widths.
// Feature grids still respond to image content through local intensity
// moments, and positional embeddings live at each model's native grid and
// are bilinearly interpolated to the working resolution, exactly as the
// full pipelines do when run above their training resolution.

import { Rng } from './rand.js';
import { Raster, resizeBilinear } from './image.js';

export interface BackboneSpec {
  /** Pixels per output grid cell; resolution must divide by this. */
  stride: number;
  /** Feature channels entering the pooling layer. */
  embedDim: number;
  heads: number;
  /** Per-head query/key/value width. */
  headDim: number;
  /** Projected output channels; the space queries live in. */
  outDim: number;
  /** Native positional-embedding grid (training resolution / stride). */
  baseGrid: number;
}

export const BACKBONES: Record<string, BackboneSpec> = {
  RN50: { stride: 32, embedDim: 64, heads: 8, headDim: 8, outDim: 32, baseGrid: 7 },
  RN50x4: { stride: 32, embedDim: 80, heads: 10, headDim: 8, outDim: 40, baseGrid: 9 },
  RN50x64: { stride: 32, embedDim: 112, heads: 14, headDim: 8, outDim: 56, baseGrid: 14 },
  'owlvit-b32': { stride: 32, embedDim: 96, heads: 12, headDim: 8, outDim: 48, baseGrid: 24 },
  'owlvit-b16': { stride: 16, embedDim: 96, heads: 12, headDim: 8, outDim: 48, baseGrid: 48 },
  'owlvit-l14': { stride: 14, embedDim: 128, heads: 16, headDim: 8, outDim: 64, baseGrid: 60 },
};

export type BackboneName = keyof typeof BACKBONES;

export interface PoolWeights {
  heads: number;
  headDim: number;
  embedDim: number;
  outDim: number;
  /** Per head: headDim x embedDim row-major, and headDim bias. */
  queryW: Float64Array[];
  queryB: Float64Array[];
  keyW: Float64Array[];
  keyB: Float64Array[];
  valueW: Float64Array[];
  valueB: Float64Array[];
  /** outDim x (heads * headDim) row-major. */
  outW: Float64Array;
  outB: Float64Array;
}

function buildPoolWeights(name: string, spec: BackboneSpec): PoolWeights {
  const scale = 1 / Math.sqrt(spec.embedDim);
  const block = (label: string, n: number, s: number) =>
    Rng.from('backbone', name, label).normals(n, s);
  const perHead = (label: string, rows: number) => {
    const w: Float64Array[] = [];
    const b: Float64Array[] = [];
    for (let h = 0; h < spec.heads; h++) {
      w.push(block(`${label}_w${h}`, rows * spec.embedDim, scale));
      b.push(block(`${label}_b${h}`, rows, 0.02));
    }
    return { w, b };
  };
  const q = perHead('query', spec.headDim);
  const k = perHead('key', spec.headDim);
  const v = perHead('value', spec.headDim);
  return {
    heads: spec.heads,
    headDim: spec.headDim,
    embedDim: spec.embedDim,
    outDim: spec.outDim,
    queryW: q.w,
    queryB: q.b,
    keyW: k.w,
    keyB: k.b,
    valueW: v.w,
    valueB: v.b,
    outW: block('out_w', spec.outDim * spec.heads * spec.headDim, 1 / Math.sqrt(spec.heads * spec.headDim)),
    outB: block('out_b', spec.outDim, 0.02),
  };
}

/** Patch statistics feeding the stem: mean, spread, two gradients, center-surround. */
const STEM_MOMENTS = 5;

export class Backbone {
  readonly name: string;
  readonly spec: BackboneSpec;
  readonly pool: PoolWeights;
  private stemW: Float64Array;
  private stemB: Float64Array;
  private basePos: Float64Array;

  constructor(name: string) {
    const spec = BACKBONES[name];
    if (!spec) {
      throw new Error(
        `unknown backbone ${JSON.stringify(name)}; expected one of ${Object.keys(BACKBONES).join(', ')}`,
      );
    }
    this.name = name;
    this.spec = spec;
    this.pool = buildPoolWeights(name, spec);
    this.stemW = Rng.from('backbone', name, 'stem_w').normals(spec.embedDim * STEM_MOMENTS, 1.2);
    this.stemB = Rng.from('backbone', name, 'stem_b').normals(spec.embedDim, 0.1);
    this.basePos = Rng.from('backbone', name, 'pos').normals(spec.baseGrid * spec.baseGrid * spec.embedDim, 0.3);
  }

  /** Output grid side length; rejects resolutions the stride cannot tile. */
  gridFor(resolution: number): number {
    if (!Number.isInteger(resolution) || resolution < this.spec.stride) {
      throw new Error(`bad resolution ${resolution}`);
    }
    if (resolution % this.spec.stride !== 0) {
      throw new Error(
        `resolution ${resolution} not divisible by ${this.name} stride ${this.spec.stride}`,
      );
    }
    return resolution / this.spec.stride;
  }

  /** Positional embeddings for a grid x grid layout, (grid^2) x embedDim. */
  positionalEmbedding(grid: number): Float64Array {
    const { baseGrid, embedDim } = this.spec;
    if (grid === baseGrid) return this.basePos.slice();
    const out = new Float64Array(grid * grid * embedDim);
    for (let r = 0; r < grid; r++) {
      // Align corners: the first and last grid cells pin to the base ends.
      const fy = grid === 1 ? (baseGrid - 1) / 2 : (r * (baseGrid - 1)) / (grid - 1);
      const y0 = Math.min(baseGrid - 1, Math.floor(fy));
      const y1 = Math.min(baseGrid - 1, y0 + 1);
      const wy = fy - y0;
      for (let c = 0; c < grid; c++) {
        const fx = grid === 1 ? (baseGrid - 1) / 2 : (c * (baseGrid - 1)) / (grid - 1);
        const x0 = Math.min(baseGrid - 1, Math.floor(fx));
        const x1 = Math.min(baseGrid - 1, x0 + 1);
        const wx = fx - x0;
        const o = (r * grid + c) * embedDim;
        const p00 = (y0 * baseGrid + x0) * embedDim;
        const p01 = (y0 * baseGrid + x1) * embedDim;
        const p10 = (y1 * baseGrid + x0) * embedDim;
        const p11 = (y1 * baseGrid + x1) * embedDim;
        for (let d = 0; d < embedDim; d++) {
          const top = this.basePos[p00 + d] * (1 - wx) + this.basePos[p01 + d] * wx;
          const bot = this.basePos[p10 + d] * (1 - wx) + this.basePos[p11 + d] * wx;
          out[o + d] = top * (1 - wy) + bot * wy;
        }
      }
    }
    return out;
  }

  /**
   * Feature grid for one image: resize to resolution x resolution, reduce
   * each stride x stride patch to intensity moments, project through the
   * stem, add interpolated positional embeddings. Returns (grid^2) x
   * embedDim row-major.
   */
  features(img: Raster, resolution: number): { grid: number; data: Float64Array } {
    const grid = this.gridFor(resolution);
    const { stride, embedDim } = this.spec;
    const resized =
      img.width === resolution && img.height === resolution
        ? img
        : resizeBilinear(img, resolution, resolution);
    const pos = this.positionalEmbedding(grid);
    const data = new Float64Array(grid * grid * embedDim);
    const moments = new Float64Array(STEM_MOMENTS);
    for (let pr = 0; pr < grid; pr++) {
      for (let pc = 0; pc < grid; pc++) {
        patchMoments(resized, pr * stride, pc * stride, stride, moments);
        const o = (pr * grid + pc) * embedDim;
        for (let d = 0; d < embedDim; d++) {
          let acc = this.stemB[d];
          for (let m = 0; m < STEM_MOMENTS; m++) acc += this.stemW[d * STEM_MOMENTS + m] * moments[m];
          data[o + d] = Math.tanh(acc) + pos[o + d];
        }
      }
    }
    return { grid, data };
  }
}

function patchMoments(img: Raster, row: number, col: number, side: number, out: Float64Array): void {
  const w = img.width;
  const half = side / 2;
  let sum = 0;
  let sumSq = 0;
  let left = 0;
  let right = 0;
  let top = 0;
  let bottom = 0;
  let center = 0;
  let centerN = 0;
  for (let r = 0; r < side; r++) {
    for (let c = 0; c < side; c++) {
      const v = img.gray[(row + r) * w + (col + c)];
      sum += v;
      sumSq += v * v;
      if (c < half) left += v;
      else right += v;
      if (r < half) top += v;
      else bottom += v;
      if (r >= side / 4 && r < (3 * side) / 4 && c >= side / 4 && c < (3 * side) / 4) {
        center += v;
        centerN++;
      }
    }
  }
  const n = side * side;
  const mean = sum / n;
  out[0] = mean;
  out[1] = Math.sqrt(Math.max(0, sumSq / n - mean * mean));
  out[2] = (right - left) / (n / 2);
  out[3] = (bottom - top) / (n / 2);
  out[4] = centerN > 0 ? center / centerN - mean : 0;
}
