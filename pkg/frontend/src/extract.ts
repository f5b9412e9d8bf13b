// Batch extraction: walk an image directory, run the backbone once per
// image, and stream three packs through single writers (the dense
// per-location pack, the attention-pooled global pack, and optionally a
// uniform-attention check pack whose vectors must match the dense means).
// Undecodable files are skipped and logged, never fatal.

import * as fs from 'node:fs';
import * as path from 'node:path';
import { Backbone } from './backbone.js';
import { ExtractorConfig } from './config.js';
import { decodeImage, DecodeError } from './image.js';
import { PackStats, PackWriter } from './pack.js';
import { attentionPool, denseProject } from './project.js';

export interface SkippedImage {
  file: string;
  reason: string;
}

export interface ExtractResult {
  images: number;
  skipped: SkippedImage[];
  grid: number;
  channels: number;
  files: { dense: string; global: string; check?: string };
  stats: { dense: PackStats; global: PackStats; check?: PackStats };
}

export interface ExtractOptions {
  selfCheck?: boolean;
  log?: (line: string) => void;
}

const IMAGE_EXTENSIONS = new Set(['.pgm', '.ppm']);

export function listImageFiles(imageDir: string): string[] {
  return fs
    .readdirSync(imageDir)
    .filter((f) => IMAGE_EXTENSIONS.has(path.extname(f).toLowerCase()))
    .sort()
    .map((f) => path.join(imageDir, f));
}

export function imageIdFor(file: string): string {
  return path.basename(file, path.extname(file));
}

export function extractImages(
  imageDir: string,
  outDir: string,
  cfg: ExtractorConfig,
  opts: ExtractOptions = {},
): ExtractResult {
  const log = opts.log ?? ((line: string) => console.error(line));
  const files = listImageFiles(imageDir);
  if (files.length === 0) {
    throw new Error(`no .pgm/.ppm images in ${imageDir}`);
  }
  const backbone = new Backbone(cfg.backbone);
  const grid = backbone.gridFor(cfg.resolution);
  const channels = backbone.spec.outDim;
  fs.mkdirSync(outDir, { recursive: true });
  const densePath = path.join(outDir, 'dense.epk');
  const globalPath = path.join(outDir, 'global.epk');
  const checkPath = path.join(outDir, 'selfcheck.epk');

  const writers = {
    dense: new PackWriter(densePath),
    global: new PackWriter(globalPath),
    check: opts.selfCheck ? new PackWriter(checkPath) : null,
  };
  const skipped: SkippedImage[] = [];
  let images = 0;
  try {
    for (let start = 0; start < files.length; start += cfg.batchSize) {
      for (const file of files.slice(start, start + cfg.batchSize)) {
        let raster;
        try {
          raster = decodeImage(fs.readFileSync(file));
        } catch (err) {
          if (!(err instanceof DecodeError)) throw err;
          skipped.push({ file, reason: err.message });
          log(`skipping ${file}: ${err.message}`);
          continue;
        }
        const imageId = imageIdFor(file);
        const feat = backbone.features(raster, cfg.resolution);
        const nLoc = grid * grid;
        writers.dense.add({
          imageId,
          gridH: grid,
          gridW: grid,
          method: 'dense',
          vectors: Float32Array.from(denseProject(feat.data, nLoc, backbone.pool)),
          channels,
        });
        writers.global.add({
          imageId,
          gridH: grid,
          gridW: grid,
          method: 'global',
          vectors: Float32Array.from(attentionPool(feat.data, nLoc, backbone.pool)),
          channels,
        });
        writers.check?.add({
          imageId,
          gridH: grid,
          gridW: grid,
          method: 'global',
          vectors: Float32Array.from(attentionPool(feat.data, nLoc, backbone.pool, { uniform: true })),
          channels,
        });
        images++;
      }
    }
  } catch (err) {
    writers.dense.abort();
    writers.global.abort();
    writers.check?.abort();
    throw err;
  }
  if (images === 0) {
    writers.dense.abort();
    writers.global.abort();
    writers.check?.abort();
    throw new Error(`no decodable images in ${imageDir} (${skipped.length} skipped)`);
  }
  const denseStats = writers.dense.close();
  const globalStats = writers.global.close();
  const checkStats = writers.check?.close();
  return {
    images,
    skipped,
    grid,
    channels,
    files: {
      dense: densePath,
      global: globalPath,
      ...(opts.selfCheck ? { check: checkPath } : {}),
    },
    stats: {
      dense: denseStats,
      global: globalStats,
      ...(checkStats ? { check: checkStats } : {}),
    },
  };
}
