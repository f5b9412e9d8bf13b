// Extraction settings: one validated object threaded through every
// command. Flags override config-file values override defaults; the
// resolution/stride invariant is checked here so bad combinations fail
// before any file IO.

import * as fs from 'node:fs';
import { z } from 'zod';
import { BACKBONES } from './backbone.js';
import { SAM_DEFAULTS } from './masks.js';
import { DEFAULT_TEMPLATES } from './prompts.js';

/** Raised for unreadable or structurally invalid config input. */
export class ConfigError extends Error {}

const backboneNames = Object.keys(BACKBONES) as [string, ...string[]];

const samSchema = z
  .object({
    points: z.union([z.literal(64), z.literal(256), z.literal(1024)]),
    iouThresh: z.number().gt(0).lte(1),
    stability: z.number().gt(0).lte(1),
    stabilityOffset: z.number().gte(0).lt(1),
    nms: z.number().gt(0).lte(1),
  })
  .strict();

const configSchema = z
  .object({
    backbone: z.enum(backboneNames),
    resolution: z.number().int().positive(),
    templates: z
      .array(z.string().refine((t) => t.includes('{}'), { message: 'template needs a {} slot' }))
      .nonempty(),
    sam: samSchema,
    batchSize: z.number().int().positive(),
    device: z.string().min(1),
  })
  .strict();

export type ExtractorConfig = z.infer<typeof configSchema>;

export const CONFIG_DEFAULTS: ExtractorConfig = {
  backbone: 'RN50',
  resolution: 224,
  templates: [...DEFAULT_TEMPLATES] as [string, ...string[]],
  sam: { ...SAM_DEFAULTS, points: 64 },
  batchSize: 8,
  device: 'cpu',
};

type DeepPartial<T> = { [K in keyof T]?: T[K] extends object ? DeepPartial<T[K]> : T[K] };
export type ConfigOverrides = DeepPartial<ExtractorConfig>;

function prune<T extends object>(obj: T): Partial<T> {
  const out: Record<string, unknown> = {};
  for (const [k, v] of Object.entries(obj)) {
    if (v !== undefined) out[k] = v;
  }
  return out as Partial<T>;
}

/**
 * Merge defaults, an optional JSON config file, and flag overrides (in
 * rising precedence), then validate. Throws ConfigError for unreadable or
 * malformed input and plain Error for value-level violations.
 */
export function resolveConfig(overrides: ConfigOverrides = {}, configPath?: string): ExtractorConfig {
  let fromFile: ConfigOverrides = {};
  if (configPath !== undefined) {
    let raw: string;
    try {
      raw = fs.readFileSync(configPath, 'utf8');
    } catch (err) {
      throw new ConfigError(`cannot read config ${configPath}: ${(err as Error).message}`);
    }
    try {
      fromFile = JSON.parse(raw) as ConfigOverrides;
    } catch (err) {
      throw new ConfigError(`config ${configPath} is not valid JSON: ${(err as Error).message}`);
    }
  }
  const merged = {
    ...CONFIG_DEFAULTS,
    ...prune(fromFile),
    ...prune(overrides),
    sam: {
      ...CONFIG_DEFAULTS.sam,
      ...prune(fromFile.sam ?? {}),
      ...prune(overrides.sam ?? {}),
    },
  };
  const parsed = configSchema.safeParse(merged);
  if (!parsed.success) {
    const issue = parsed.error.issues[0];
    throw new ConfigError(`invalid config: ${issue.path.join('.') || 'root'}: ${issue.message}`);
  }
  const cfg = parsed.data;
  const stride = BACKBONES[cfg.backbone].stride;
  if (cfg.resolution % stride !== 0) {
    throw new Error(`resolution ${cfg.resolution} not divisible by ${cfg.backbone} stride ${stride}`);
  }
  return cfg;
}
