// Mask proposals from a point grid, as a stand-in for a promptable
// segmenter: each point seeds a tolerance flood fill, candidates pass a
// predicted-quality gate and a stability gate (agreement across a
// tolerance sweep), and survivors go through mask-level NMS. Files use the
// retrieval engine's RLE JSON layout: row-major runs alternating zero/one,
// zero run first.

import * as fs from 'node:fs';
import { Raster } from './image.js';

export interface SamConfig {
  /** Prompt points, laid out as a square grid. */
  points: number;
  /** Minimum predicted mask quality. */
  iouThresh: number;
  /** Minimum agreement between fills at swept tolerances. */
  stability: number;
  /** Relative tolerance sweep width for the stability check. */
  stabilityOffset: number;
  /** Mask-overlap threshold above which the smaller candidate drops. */
  nms: number;
}

export const SAM_DEFAULTS: SamConfig = {
  points: 64,
  iouThresh: 0.88,
  stability: 0.88,
  stabilityOffset: 0.1,
  nms: 0.7,
};

const FILL_TOLERANCE = 0.1;
const MIN_MASK_PIXELS = 16;
const MAX_MASK_FRACTION = 0.95;

export function rleEncode(mask: Uint8Array): number[] {
  if (mask.length === 0) return [];
  const runs: number[] = [];
  let current = mask[0] ? 1 : 0;
  let run = 0;
  if (current === 1) runs.push(0);
  for (const px of mask) {
    const bit = px ? 1 : 0;
    if (bit === current) {
      run++;
    } else {
      runs.push(run);
      current = bit;
      run = 1;
    }
  }
  runs.push(run);
  return runs;
}

export function rleDecode(runs: readonly number[], h: number, w: number): Uint8Array {
  let total = 0;
  for (const r of runs) {
    if (r < 0) throw new Error('negative run length');
    total += r;
  }
  if (total !== h * w) {
    throw new Error(`run lengths sum to ${total}, expected ${h * w}`);
  }
  const out = new Uint8Array(h * w);
  let pos = 0;
  let bit = 0;
  for (const r of runs) {
    if (bit === 1) out.fill(1, pos, pos + r);
    pos += r;
    bit ^= 1;
  }
  return out;
}

export function maskIou(a: Uint8Array, b: Uint8Array): number {
  let inter = 0;
  let union = 0;
  for (let i = 0; i < a.length; i++) {
    const x = a[i] | b[i];
    union += x;
    inter += a[i] & b[i];
  }
  return union === 0 ? 0 : inter / union;
}

function maskArea(mask: Uint8Array): number {
  let area = 0;
  for (const px of mask) area += px;
  return area;
}

/** 4-connected region of pixels within tol of the seed neighborhood mean. */
function floodFill(img: Raster, seedRow: number, seedCol: number, tol: number): Uint8Array {
  const { width: w, height: h, gray } = img;
  let seedSum = 0;
  let seedN = 0;
  for (let dr = -1; dr <= 1; dr++) {
    for (let dc = -1; dc <= 1; dc++) {
      const r = seedRow + dr;
      const c = seedCol + dc;
      if (r >= 0 && r < h && c >= 0 && c < w) {
        seedSum += gray[r * w + c];
        seedN++;
      }
    }
  }
  const target = seedSum / seedN;
  const mask = new Uint8Array(w * h);
  const start = seedRow * w + seedCol;
  if (Math.abs(gray[start] - target) > tol) return mask;
  const queue = new Int32Array(w * h);
  let head = 0;
  let tail = 0;
  queue[tail++] = start;
  mask[start] = 1;
  while (head < tail) {
    const idx = queue[head++];
    const r = (idx / w) | 0;
    const c = idx % w;
    if (r > 0) visit(idx - w);
    if (r < h - 1) visit(idx + w);
    if (c > 0) visit(idx - 1);
    if (c < w - 1) visit(idx + 1);
  }
  function visit(n: number): void {
    if (!mask[n] && Math.abs(gray[n] - target) <= tol) {
      mask[n] = 1;
      queue[tail++] = n;
    }
  }
  return mask;
}

/**
 * Propose masks for one image. Deterministic for a given raster and
 * config; returned masks are at the raster's resolution, ordered largest
 * first, with pairwise overlap below the NMS threshold.
 */
export function generateMasks(img: Raster, cfg: SamConfig): Uint8Array[] {
  const side = Math.round(Math.sqrt(cfg.points));
  if (side * side !== cfg.points) {
    throw new Error(`point count ${cfg.points} is not a square grid`);
  }
  const total = img.width * img.height;
  const candidates: Uint8Array[] = [];
  for (let pr = 0; pr < side; pr++) {
    for (let pc = 0; pc < side; pc++) {
      const row = Math.min(img.height - 1, Math.floor(((pr + 0.5) * img.height) / side));
      const col = Math.min(img.width - 1, Math.floor(((pc + 0.5) * img.width) / side));
      const mask = floodFill(img, row, col, FILL_TOLERANCE);
      const area = maskArea(mask);
      if (area < MIN_MASK_PIXELS || area > MAX_MASK_FRACTION * total) continue;
      const tight = floodFill(img, row, col, FILL_TOLERANCE * (1 - cfg.stabilityOffset));
      if (maskIou(mask, tight) < cfg.stability) continue;
      const wide = floodFill(img, row, col, FILL_TOLERANCE * (1 + cfg.stabilityOffset));
      if (maskIou(mask, wide) < cfg.iouThresh) continue;
      candidates.push(mask);
    }
  }
  candidates.sort((a, b) => maskArea(b) - maskArea(a));
  const kept: Uint8Array[] = [];
  for (const cand of candidates) {
    if (kept.every((k) => maskIou(cand, k) < cfg.nms)) kept.push(cand);
  }
  return kept;
}

export interface MaskFile {
  image_id: string;
  masks: Array<{ size: [number, number]; rle: number[] }>;
}

export function saveMaskFile(imageId: string, masks: readonly Uint8Array[], size: [number, number], path: string): void {
  const data: MaskFile = {
    image_id: imageId,
    masks: masks.map((m) => ({ size, rle: rleEncode(m) })),
  };
  fs.writeFileSync(path, JSON.stringify(data));
}

export function loadMaskFile(path: string): { imageId: string; size: [number, number]; masks: Uint8Array[] } {
  const data = JSON.parse(fs.readFileSync(path, 'utf8')) as MaskFile;
  const masks = data.masks.map((m) => rleDecode(m.rle, m.size[0], m.size[1]));
  const size = data.masks.length > 0 ? data.masks[0].size : ([0, 0] as [number, number]);
  return { imageId: data.image_id, size, masks };
}
