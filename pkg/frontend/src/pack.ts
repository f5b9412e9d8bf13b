// Embedding pack ("EPK1") writer and reader, byte-compatible with the
// retrieval engine's store module. All integers and floats little-endian:
//   header: magic "EPK1" | version u16 | flags u16 | channels u32 | dtype u8
//           | record count u64                                    (21 bytes)
//   record: id length u16 | id utf-8 | grid h u16 | grid w u16 | vec count
//           u32 | method u8 | vec count x channels f32 | assignment labels
//           u16 x grid area when flags bit 0 is set
// The header is written last (backpatched) so records can stream.

import * as fs from 'node:fs';
import * as os from 'node:os';

if (os.endianness() !== 'LE') {
  throw new Error('pack io assumes a little-endian platform');
}

export const METHODS = [
  'dense',
  'global',
  'kmeans',
  'ag_t',
  'ag_f',
  'region_proposal',
  'anchors',
  'attention',
  'adaptive_kmeans',
  'mixed',
] as const;

export type Method = (typeof METHODS)[number];

const MAGIC = 'EPK1';
const HEADER_SIZE = 21;

export class PackFormatError extends Error {}

export class CorruptPackError extends Error {
  readonly offset: number;

  constructor(message: string, offset: number) {
    super(`${message} (byte offset ${offset})`);
    this.offset = offset;
  }
}

export interface PackRecord {
  imageId: string;
  gridH: number;
  gridW: number;
  method: Method;
  /** vecCount x channels, row-major. */
  vectors: Float32Array;
  channels: number;
  assignment?: Uint16Array;
}

export function vecCount(rec: PackRecord): number {
  return rec.vectors.length / rec.channels;
}

function validateRecord(rec: PackRecord): void {
  if (!(METHODS as readonly string[]).includes(rec.method)) {
    throw new PackFormatError(`unknown method ${JSON.stringify(rec.method)}`);
  }
  if (rec.channels < 1 || rec.vectors.length % rec.channels !== 0) {
    throw new PackFormatError(`record ${JSON.stringify(rec.imageId)}: vector length not a multiple of channels`);
  }
  const n = rec.vectors.length / rec.channels;
  if (n < 1) {
    throw new PackFormatError(`record ${JSON.stringify(rec.imageId)} has no vectors`);
  }
  if (rec.gridH < 1 || rec.gridW < 1 || rec.gridH > 0xffff || rec.gridW > 0xffff) {
    throw new PackFormatError(`record ${JSON.stringify(rec.imageId)} grid dims out of range`);
  }
  if (rec.method === 'dense' && n !== rec.gridH * rec.gridW) {
    throw new PackFormatError(
      `dense record ${JSON.stringify(rec.imageId)}: vec_count ${n} != grid area`,
    );
  }
  if (rec.assignment !== undefined) {
    if (rec.assignment.length !== rec.gridH * rec.gridW) {
      throw new PackFormatError(`record ${JSON.stringify(rec.imageId)}: assignment length != grid area`);
    }
    for (const label of rec.assignment) {
      if (label >= n) {
        throw new PackFormatError(`record ${JSON.stringify(rec.imageId)}: assignment label >= vec_count`);
      }
    }
  }
}

export interface PackStats {
  records: number;
  bytes: number;
}

/** Streaming writer; all records must share one channel count. */
export class PackWriter {
  private fd: number;
  private count = 0;
  private bytes = HEADER_SIZE;
  private channels: number | null = null;
  private withAssignment = false;

  constructor(readonly path: string) {
    this.fd = fs.openSync(path, 'w');
    fs.writeSync(this.fd, Buffer.alloc(HEADER_SIZE));
  }

  add(rec: PackRecord): void {
    validateRecord(rec);
    if (this.channels === null) {
      this.channels = rec.channels;
      this.withAssignment = rec.assignment !== undefined;
    } else if (rec.channels !== this.channels) {
      throw new PackFormatError(
        `channel mismatch mid-stream: record ${JSON.stringify(rec.imageId)} has ` +
          `${rec.channels}, pack has ${this.channels}`,
      );
    }
    if ((rec.assignment !== undefined) !== this.withAssignment) {
      throw new PackFormatError(
        `assignment presence mismatch mid-stream at record ${JSON.stringify(rec.imageId)}`,
      );
    }
    const id = Buffer.from(rec.imageId, 'utf8');
    if (id.length > 0xffff) {
      throw new PackFormatError(`image_id too long: ${id.length} bytes`);
    }
    const head = Buffer.alloc(2 + id.length + 9);
    head.writeUInt16LE(id.length, 0);
    id.copy(head, 2);
    const o = 2 + id.length;
    head.writeUInt16LE(rec.gridH, o);
    head.writeUInt16LE(rec.gridW, o + 2);
    head.writeUInt32LE(rec.vectors.length / rec.channels, o + 4);
    head.writeUInt8(METHODS.indexOf(rec.method), o + 8);
    const parts = [head, Buffer.from(rec.vectors.buffer, rec.vectors.byteOffset, rec.vectors.byteLength)];
    if (this.withAssignment && rec.assignment) {
      parts.push(Buffer.from(rec.assignment.buffer, rec.assignment.byteOffset, rec.assignment.byteLength));
    }
    const chunk = Buffer.concat(parts);
    fs.writeSync(this.fd, chunk);
    this.bytes += chunk.length;
    this.count += 1;
  }

  /** Backpatch the header and close; returns record and byte totals. */
  close(): PackStats {
    const header = Buffer.alloc(HEADER_SIZE);
    header.write(MAGIC, 0, 'latin1');
    header.writeUInt16LE(1, 4);
    header.writeUInt16LE(this.withAssignment ? 1 : 0, 6);
    header.writeUInt32LE(this.channels ?? 0, 8);
    header.writeUInt8(0, 12);
    header.writeBigUInt64LE(BigInt(this.count), 13);
    fs.writeSync(this.fd, header, 0, HEADER_SIZE, 0);
    fs.closeSync(this.fd);
    return { records: this.count, bytes: this.bytes };
  }

  /** Close the descriptor without backpatching (error paths). */
  abort(): void {
    fs.closeSync(this.fd);
  }
}

export function writePack(records: Iterable<PackRecord>, path: string): PackStats {
  const writer = new PackWriter(path);
  try {
    for (const rec of records) writer.add(rec);
  } catch (err) {
    writer.abort();
    throw err;
  }
  return writer.close();
}

export function readPack(path: string): PackRecord[] {
  const buf = fs.readFileSync(path);
  if (buf.length < HEADER_SIZE) throw new CorruptPackError('truncated header', 0);
  const magic = buf.toString('latin1', 0, 4);
  if (magic !== MAGIC) {
    throw new PackFormatError(`bad magic ${JSON.stringify(magic)}, expected "EPK1"`);
  }
  const version = buf.readUInt16LE(4);
  if (version !== 1) throw new PackFormatError(`unsupported version ${version}`);
  const flags = buf.readUInt16LE(6);
  if (flags & ~1) {
    throw new PackFormatError(`unknown flag bits 0x${flags.toString(16).padStart(4, '0')}`);
  }
  const channels = buf.readUInt32LE(8);
  const dtype = buf.readUInt8(12);
  if (dtype !== 0) throw new PackFormatError(`unsupported dtype code ${dtype}`);
  const count = Number(buf.readBigUInt64LE(13));
  const withAssignment = (flags & 1) === 1;

  let pos = HEADER_SIZE;
  const take = (n: number, what: string): number => {
    if (buf.length - pos < n) {
      throw new CorruptPackError(`truncated ${what}: wanted ${n} bytes, got ${buf.length - pos}`, pos);
    }
    const at = pos;
    pos += n;
    return at;
  };

  const records: PackRecord[] = [];
  for (let i = 0; i < count; i++) {
    const idLen = buf.readUInt16LE(take(2, 'record id length'));
    const idAt = take(idLen, 'record id');
    const imageId = buf.toString('utf8', idAt, idAt + idLen);
    const headAt = take(9, 'record header');
    const gridH = buf.readUInt16LE(headAt);
    const gridW = buf.readUInt16LE(headAt + 2);
    const n = buf.readUInt32LE(headAt + 4);
    const methodCode = buf.readUInt8(headAt + 8);
    if (methodCode >= METHODS.length) {
      throw new PackFormatError(`unknown method code ${methodCode}`);
    }
    const payloadAt = take(n * channels * 4, 'record payload');
    const vectors = new Float32Array(n * channels);
    for (let j = 0; j < vectors.length; j++) vectors[j] = buf.readFloatLE(payloadAt + 4 * j);
    let assignment: Uint16Array | undefined;
    if (withAssignment) {
      const at = take(gridH * gridW * 2, 'assignment map');
      assignment = new Uint16Array(gridH * gridW);
      for (let j = 0; j < assignment.length; j++) assignment[j] = buf.readUInt16LE(at + 2 * j);
    }
    const rec: PackRecord = {
      imageId,
      gridH,
      gridW,
      method: METHODS[methodCode],
      vectors,
      channels,
      ...(assignment !== undefined ? { assignment } : {}),
    };
    validateRecord(rec);
    records.push(rec);
  }
  if (pos !== buf.length) throw new CorruptPackError('trailing bytes after last record', pos);
  return records;
}
