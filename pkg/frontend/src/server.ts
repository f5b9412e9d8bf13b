// Text encoder service: the pluggable encoder the retrieval service
// queries at search time. POST /v1/encode {"text": ...} answers with the
// prompt-ensembled unit vector for that category name.

import * as http from 'node:http';
import { Backbone } from './backbone.js';
import { ExtractorConfig } from './config.js';
import { ensembleQuery, TextTower } from './encode.js';

const BODY_LIMIT = 1 << 20;

export function createEncoderServer(cfg: ExtractorConfig): http.Server {
  const tower = new TextTower(new Backbone(cfg.backbone));
  return http.createServer((req, res) => {
    const respond = (code: number, body: unknown): void => {
      const payload = JSON.stringify(body);
      res.writeHead(code, {
        'content-type': 'application/json',
        'content-length': Buffer.byteLength(payload),
      });
      res.end(payload);
    };
    if (req.method === 'GET' && req.url === '/v1/healthz') {
      respond(200, { status: 'ok' });
      return;
    }
    if (req.method !== 'POST' || req.url !== '/v1/encode') {
      respond(404, { detail: 'not found' });
      return;
    }
    const chunks: Buffer[] = [];
    let size = 0;
    req.on('data', (chunk: Buffer) => {
      size += chunk.length;
      if (size > BODY_LIMIT) {
        respond(413, { detail: 'body too large' });
        req.destroy();
        return;
      }
      chunks.push(chunk);
    });
    req.on('end', () => {
      if (res.writableEnded) return;
      let body: unknown;
      try {
        body = JSON.parse(Buffer.concat(chunks).toString('utf8'));
      } catch {
        respond(400, { detail: 'invalid JSON body' });
        return;
      }
      const text = (body as { text?: unknown })?.text;
      if (typeof text !== 'string' || text.trim() === '') {
        respond(400, { detail: 'field "text" must be a non-empty string' });
        return;
      }
      const vector = ensembleQuery(tower, text.trim(), cfg.templates);
      respond(200, { vector: Array.from(vector) });
    });
  });
}
