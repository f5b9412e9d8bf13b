#!/usr/bin/env node
// Command-line frontend: synthesize scenes, extract embedding packs, build
// query packs, propose masks, or serve the text encoder over HTTP. Exit
// codes follow the retrieval engine's tool: 1 for value errors, 2 for
// missing files and bad configs.

import * as fs from 'node:fs';
import * as path from 'node:path';
import yargs from 'yargs';
import type { Argv } from 'yargs';
import { hideBin } from 'yargs/helpers';
import { BACKBONES, Backbone } from './backbone.js';
import { ConfigError, ConfigOverrides, resolveConfig } from './config.js';
import { buildQueryRecords, TextTower } from './encode.js';
import { extractImages } from './extract.js';
import { decodeImage, DecodeError, encodePgm, resizeBilinear, synthScene } from './image.js';
import { generateMasks, saveMaskFile } from './masks.js';
import { writePack } from './pack.js';
import { Rng } from './rand.js';
import { createEncoderServer } from './server.js';

function fail(err: unknown): never {
  const e = err as NodeJS.ErrnoException;
  console.error(`error: ${e?.message ?? String(err)}`);
  process.exit(e instanceof ConfigError || e?.code === 'ENOENT' ? 2 : 1);
}

function run(fn: () => void): void {
  try {
    fn();
  } catch (err) {
    fail(err);
  }
}

interface ConfigFlags {
  backbone?: string;
  resolution?: number;
  'batch-size'?: number;
  device?: string;
  'templates-file'?: string;
  config?: string;
  points?: number;
  'iou-thresh'?: number;
  stability?: number;
  'stability-offset'?: number;
  nms?: number;
}

function configFromFlags(argv: ConfigFlags) {
  const overrides: ConfigOverrides = {
    backbone: argv.backbone,
    resolution: argv.resolution,
    batchSize: argv['batch-size'],
    device: argv.device,
    sam: {
      points: argv.points as 64 | 256 | 1024 | undefined,
      iouThresh: argv['iou-thresh'],
      stability: argv.stability,
      stabilityOffset: argv['stability-offset'],
      nms: argv.nms,
    },
  };
  if (argv['templates-file'] !== undefined) {
    const lines = fs
      .readFileSync(argv['templates-file'], 'utf8')
      .split('\n')
      .map((l) => l.trim())
      .filter((l) => l.length > 0);
    overrides.templates = lines as [string, ...string[]];
  }
  return resolveConfig(overrides, argv.config);
}

function addConfigOptions<T>(y: Argv<T>) {
  return y
    .option('backbone', { type: 'string', choices: Object.keys(BACKBONES), describe: 'vision backbone' })
    .option('resolution', { type: 'number', describe: 'square working resolution in pixels' })
    .option('batch-size', { type: 'number', describe: 'images per processing batch' })
    .option('device', { type: 'string', describe: 'compute device label' })
    .option('templates-file', { type: 'string', describe: 'prompt templates, one per line' })
    .option('config', { type: 'string', describe: 'JSON settings file (flags win)' });
}

function readCategories(argv: { categories?: string; 'categories-file'?: string }): string[] {
  if ((argv.categories === undefined) === (argv['categories-file'] === undefined)) {
    console.error('error: pass exactly one of --categories or --categories-file');
    process.exit(2);
  }
  if (argv.categories !== undefined) {
    return argv.categories
      .split(',')
      .map((c) => c.trim())
      .filter((c) => c.length > 0);
  }
  return fs
    .readFileSync(argv['categories-file']!, 'utf8')
    .split('\n')
    .map((l) => l.trim())
    .filter((l) => l.length > 0);
}

export function buildParser() {
  return yargs()
    .scriptName('clusterlens-extract')
    .usage('$0 <command> [options]')
    .command(
      'synth',
      'generate synthetic test scenes as PGM files',
      (y) =>
        y
          .option('output', { type: 'string', demandOption: true })
          .option('images', { type: 'number', default: 20 })
          .option('size', { type: 'number', default: 224 })
          .option('seed', { type: 'number', default: 0 }),
      (argv) =>
        run(() => {
          if (argv.images < 1) throw new Error('need at least one image');
          if (argv.size < 16) throw new Error('scene size too small');
          fs.mkdirSync(argv.output, { recursive: true });
          for (let i = 0; i < argv.images; i++) {
            const scene = synthScene(Rng.from('scene', argv.seed, i), argv.size);
            const name = `img${String(i).padStart(5, '0')}.pgm`;
            fs.writeFileSync(path.join(argv.output, name), encodePgm(scene));
          }
          console.log(`wrote ${argv.images} images to ${argv.output}`);
        }),
    )
    .command(
      'extract',
      'extract dense and global embedding packs from images',
      (y) =>
        addConfigOptions(y)
          .option('images', { type: 'string', demandOption: true, describe: 'directory of .pgm/.ppm files' })
          .option('output', { type: 'string', demandOption: true })
          .option('self-check', { type: 'boolean', default: false, describe: 'also write uniform-attention check vectors' }),
      (argv) =>
        run(() => {
          const cfg = configFromFlags(argv);
          if (!fs.existsSync(argv.images)) {
            const err = new Error(`image directory ${argv.images} does not exist`) as NodeJS.ErrnoException;
            err.code = 'ENOENT';
            throw err;
          }
          const result = extractImages(argv.images, argv.output, cfg, { selfCheck: argv['self-check'] });
          console.log(
            `extracted ${result.images} images at ${result.grid}x${result.grid} ` +
              `(${cfg.backbone} @ ${cfg.resolution}px, ${result.channels} channels, device ${cfg.device})`,
          );
          console.log(`wrote ${result.stats.dense.records} dense records (${result.stats.dense.bytes} bytes)`);
          console.log(`wrote ${result.stats.global.records} global records (${result.stats.global.bytes} bytes)`);
          if (result.stats.check) {
            console.log(`wrote ${result.stats.check.records} check records (${result.stats.check.bytes} bytes)`);
          }
          if (result.skipped.length > 0) {
            console.log(`skipped ${result.skipped.length} undecodable images`);
          }
        }),
    )
    .command(
      'queries',
      'build a prompt-ensembled query pack from category names',
      (y) =>
        addConfigOptions(y)
          .option('categories', { type: 'string', describe: 'comma-separated category names' })
          .option('categories-file', { type: 'string', describe: 'file of category names, one per line' })
          .option('output', { type: 'string', demandOption: true }),
      (argv) =>
        run(() => {
          const cfg = configFromFlags(argv);
          const names = readCategories(argv);
          const tower = new TextTower(new Backbone(cfg.backbone));
          const records = buildQueryRecords(names, tower, cfg.templates);
          const stats = writePack(records, argv.output);
          console.log(`wrote ${stats.records} query vectors (${stats.bytes} bytes)`);
        }),
    )
    .command(
      'masks',
      'propose segmentation masks from a point grid',
      (y) =>
        addConfigOptions(y)
          .option('images', { type: 'string', demandOption: true, describe: 'directory of .pgm/.ppm files' })
          .option('output', { type: 'string', demandOption: true })
          .option('points', { type: 'number', choices: [64, 256, 1024], describe: 'prompt points per image' })
          .option('iou-thresh', { type: 'number', describe: 'predicted quality gate' })
          .option('stability', { type: 'number', describe: 'tolerance-sweep agreement gate' })
          .option('stability-offset', { type: 'number', describe: 'tolerance sweep width' })
          .option('nms', { type: 'number', describe: 'mask overlap suppression threshold' }),
      (argv) =>
        run(() => {
          const cfg = configFromFlags(argv);
          const files = fs
            .readdirSync(argv.images)
            .filter((f) => ['.pgm', '.ppm'].includes(path.extname(f).toLowerCase()))
            .sort();
          if (files.length === 0) throw new Error(`no .pgm/.ppm images in ${argv.images}`);
          fs.mkdirSync(argv.output, { recursive: true });
          let wrote = 0;
          let total = 0;
          for (const file of files) {
            let raster;
            try {
              raster = decodeImage(fs.readFileSync(path.join(argv.images, file)));
            } catch (err) {
              if (!(err instanceof DecodeError)) throw err;
              console.error(`skipping ${file}: ${err.message}`);
              continue;
            }
            const working = resizeBilinear(raster, cfg.resolution, cfg.resolution);
            const masks = generateMasks(working, cfg.sam);
            const imageId = path.basename(file, path.extname(file));
            saveMaskFile(imageId, masks, [cfg.resolution, cfg.resolution], path.join(argv.output, `${imageId}.json`));
            wrote++;
            total += masks.length;
          }
          if (wrote === 0) throw new Error(`no decodable images in ${argv.images}`);
          console.log(`wrote masks for ${wrote} images (${total} masks, ${cfg.sam.points} points)`);
        }),
    )
    .command(
      'serve-encoder',
      'serve POST /v1/encode for the retrieval service',
      (y) =>
        addConfigOptions(y)
          .option('host', { type: 'string', default: '127.0.0.1' })
          .option('port', { type: 'number', default: 8100 }),
      (argv) =>
        run(() => {
          const cfg = configFromFlags(argv);
          const server = createEncoderServer(cfg);
          server.listen(argv.port, argv.host, () => {
            console.log(`encoder listening on http://${argv.host}:${argv.port}`);
          });
        }),
    )
    .demandCommand(1, 'pass a command')
    .strict()
    .fail((msg, err) => {
      if (err) fail(err);
      console.error(`error: ${msg}`);
      process.exit(2);
    });
}

const entry = process.argv[1] ? path.basename(process.argv[1]) : '';
if (entry === 'cli.js' || entry === 'clusterlens-extract') {
  buildParser().parseSync(hideBin(process.argv));
}
