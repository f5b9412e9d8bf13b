// Minimal raster IO: binary PGM (P5) and PPM (P6), 8-bit samples only.
// Enough to feed the extractor and synthesize test scenes without pulling
// in an image stack.

import { Rng } from './rand.js';

export class DecodeError extends Error {}

export interface Raster {
  width: number;
  height: number;
  /** Row-major luma in [0, 1]. */
  gray: Float64Array;
}

const WHITESPACE = new Set([0x20, 0x09, 0x0a, 0x0d, 0x0b, 0x0c]);

export function decodeImage(buf: Buffer): Raster {
  if (buf.length < 2) throw new DecodeError('not a PNM file: too short');
  const magic = buf.toString('latin1', 0, 2);
  if (magic !== 'P5' && magic !== 'P6') {
    throw new DecodeError(`unsupported magic ${JSON.stringify(magic)}, expected P5 or P6`);
  }
  let pos = 2;
  const fields: number[] = [];
  while (fields.length < 3) {
    while (pos < buf.length) {
      if (buf[pos] === 0x23) {
        while (pos < buf.length && buf[pos] !== 0x0a) pos++;
      } else if (WHITESPACE.has(buf[pos])) {
        pos++;
      } else {
        break;
      }
    }
    const start = pos;
    while (pos < buf.length && buf[pos] >= 0x30 && buf[pos] <= 0x39) pos++;
    if (pos === start) throw new DecodeError('malformed header: expected integer field');
    fields.push(parseInt(buf.toString('latin1', start, pos), 10));
  }
  if (pos >= buf.length || !WHITESPACE.has(buf[pos])) {
    throw new DecodeError('malformed header: missing delimiter before pixel data');
  }
  pos++;
  const [width, height, maxval] = fields;
  if (width < 1 || height < 1) throw new DecodeError(`bad dimensions ${width}x${height}`);
  if (maxval < 1 || maxval > 255) throw new DecodeError(`unsupported maxval ${maxval}`);
  const channels = magic === 'P6' ? 3 : 1;
  const need = width * height * channels;
  if (buf.length - pos < need) {
    throw new DecodeError(`truncated pixel data: wanted ${need} bytes, got ${buf.length - pos}`);
  }
  const gray = new Float64Array(width * height);
  if (channels === 1) {
    for (let i = 0; i < gray.length; i++) gray[i] = buf[pos + i] / maxval;
  } else {
    for (let i = 0; i < gray.length; i++) {
      const o = pos + 3 * i;
      gray[i] = (0.299 * buf[o] + 0.587 * buf[o + 1] + 0.114 * buf[o + 2]) / maxval;
    }
  }
  return { width, height, gray };
}

export function encodePgm(img: Raster): Buffer {
  const header = Buffer.from(`P5\n${img.width} ${img.height}\n255\n`, 'latin1');
  const pixels = Buffer.alloc(img.width * img.height);
  for (let i = 0; i < pixels.length; i++) {
    pixels[i] = Math.max(0, Math.min(255, Math.round(img.gray[i] * 255)));
  }
  return Buffer.concat([header, pixels]);
}

/** Bilinear resample with half-pixel centers, edges clamped. */
export function resizeBilinear(img: Raster, outW: number, outH: number): Raster {
  if (outW < 1 || outH < 1) throw new Error(`bad target size ${outW}x${outH}`);
  const out = new Float64Array(outW * outH);
  const sx = img.width / outW;
  const sy = img.height / outH;
  for (let r = 0; r < outH; r++) {
    const fy = Math.min(img.height - 1, Math.max(0, (r + 0.5) * sy - 0.5));
    const y0 = Math.floor(fy);
    const y1 = Math.min(img.height - 1, y0 + 1);
    const wy = fy - y0;
    for (let c = 0; c < outW; c++) {
      const fx = Math.min(img.width - 1, Math.max(0, (c + 0.5) * sx - 0.5));
      const x0 = Math.floor(fx);
      const x1 = Math.min(img.width - 1, x0 + 1);
      const wx = fx - x0;
      const top = img.gray[y0 * img.width + x0] * (1 - wx) + img.gray[y0 * img.width + x1] * wx;
      const bot = img.gray[y1 * img.width + x0] * (1 - wx) + img.gray[y1 * img.width + x1] * wx;
      out[r * outW + c] = top * (1 - wy) + bot * wy;
    }
  }
  return { width: outW, height: outH, gray: out };
}

/**
 * Seeded test scene: a soft background gradient with a handful of
 * hard-edged elliptical blobs at distinct intensities. Hard edges keep
 * mask proposals crisp and give the feature stem real structure to see.
 */
export function synthScene(rng: Rng, size: number): Raster {
  const gray = new Float64Array(size * size);
  const base = 0.25 + 0.2 * rng.next();
  const gx = 0.25 * (rng.next() - 0.5);
  const gy = 0.25 * (rng.next() - 0.5);
  for (let r = 0; r < size; r++) {
    for (let c = 0; c < size; c++) {
      gray[r * size + c] = base + gx * (c / size) + gy * (r / size);
    }
  }
  const blobs = 3 + rng.int(5);
  for (let b = 0; b < blobs; b++) {
    const cx = (0.12 + 0.76 * rng.next()) * size;
    const cy = (0.12 + 0.76 * rng.next()) * size;
    const rx = (0.05 + 0.13 * rng.next()) * size;
    const ry = (0.05 + 0.13 * rng.next()) * size;
    const angle = Math.PI * rng.next();
    const level = rng.next() < 0.5 ? base - 0.25 - 0.2 * rng.next() : base + 0.25 + 0.2 * rng.next();
    const cosA = Math.cos(angle);
    const sinA = Math.sin(angle);
    const reach = Math.ceil(Math.max(rx, ry));
    const r0 = Math.max(0, Math.floor(cy) - reach);
    const r1 = Math.min(size - 1, Math.ceil(cy) + reach);
    const c0 = Math.max(0, Math.floor(cx) - reach);
    const c1 = Math.min(size - 1, Math.ceil(cx) + reach);
    for (let r = r0; r <= r1; r++) {
      for (let c = c0; c <= c1; c++) {
        const dx = c - cx;
        const dy = r - cy;
        const u = (dx * cosA + dy * sinA) / rx;
        const v = (-dx * sinA + dy * cosA) / ry;
        if (u * u + v * v <= 1) gray[r * size + c] = level;
      }
    }
  }
  for (let i = 0; i < gray.length; i++) gray[i] = Math.max(0, Math.min(1, gray[i]));
  return { width: size, height: size, gray };
}
