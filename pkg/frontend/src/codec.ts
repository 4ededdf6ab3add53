/** Canonical byte encodings shared with the node (see docs/FORMATS.md). */

export const U32_MAX = 0xffff_ffff;
export const U64_MAX = 0xffff_ffff_ffff_ffffn;

export const TX_SIGN_UP = 1;
export const TX_REGISTER_SENSOR = 2;
export const TX_SUBSCRIBE = 5;

export const ROLE_CODES: Record<string, number> = { owner: 1, buyer: 2, both: 3 };

const SESSION_CHALLENGE_PREFIX = "datchain-session:";

export function concat(...parts: Uint8Array[]): Uint8Array {
  const out = new Uint8Array(parts.reduce((n, p) => n + p.length, 0));
  let at = 0;
  for (const p of parts) {
    out.set(p, at);
    at += p.length;
  }
  return out;
}

export function u8(value: number): Uint8Array {
  if (!Number.isInteger(value) || value < 0 || value > 0xff) {
    throw new RangeError(`u8 out of range: ${value}`);
  }
  return Uint8Array.of(value);
}

export function u32(value: number): Uint8Array {
  if (!Number.isInteger(value) || value < 0 || value > U32_MAX) {
    throw new RangeError(`u32 out of range: ${value}`);
  }
  const out = new Uint8Array(4);
  new DataView(out.buffer).setUint32(0, value, false);
  return out;
}

export function u64(value: number | bigint): Uint8Array {
  const v = typeof value === "bigint" ? value : BigInt(value);
  if (v < 0n || v > U64_MAX) throw new RangeError(`u64 out of range: ${value}`);
  const out = new Uint8Array(8);
  new DataView(out.buffer).setBigUint64(0, v, false);
  return out;
}

export function vbytes(value: Uint8Array): Uint8Array {
  return concat(u32(value.length), value);
}

export function str(value: string): Uint8Array {
  return vbytes(new TextEncoder().encode(value));
}

/** Length-prefixed map, entries sorted by key bytes (code-point order). */
export function strMap(value: Record<string, string>): Uint8Array {
  const enc = new TextEncoder();
  const entries = Object.entries(value)
    .map(([k, v]) => ({ key: enc.encode(k), val: enc.encode(v) }))
    .sort((a, b) => compareBytes(a.key, b.key));
  const parts = [u32(entries.length)];
  for (const e of entries) parts.push(vbytes(e.key), vbytes(e.val));
  return concat(...parts);
}

export function compareBytes(a: Uint8Array, b: Uint8Array): number {
  const n = Math.min(a.length, b.length);
  for (let i = 0; i < n; i++) {
    const d = (a[i] as number) - (b[i] as number);
    if (d !== 0) return d;
  }
  return a.length - b.length;
}

// -- hex / base64 ---------------------------------------------------------------

export function toHex(data: Uint8Array): string {
  let out = "";
  for (const b of data) out += b.toString(16).padStart(2, "0");
  return out;
}

export function fromHex(text: string, expected?: number): Uint8Array {
  if (text.length % 2 !== 0 || /[^0-9a-fA-F]/.test(text)) {
    throw new RangeError("invalid hex string");
  }
  const out = new Uint8Array(text.length / 2);
  for (let i = 0; i < out.length; i++) {
    out[i] = parseInt(text.slice(2 * i, 2 * i + 2), 16);
  }
  if (expected !== undefined && out.length !== expected) {
    throw new RangeError(`expected ${expected} bytes, got ${out.length}`);
  }
  return out;
}

export function toBase64(data: Uint8Array): string {
  let binary = "";
  for (let i = 0; i < data.length; i += 0x8000) {
    binary += String.fromCharCode(...data.subarray(i, i + 0x8000));
  }
  return btoa(binary);
}

export function fromBase64(text: string): Uint8Array {
  const binary = atob(text);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < out.length; i++) out[i] = binary.charCodeAt(i);
  return out;
}

export async function sha256(data: Uint8Array): Promise<Uint8Array> {
  const buf = data.buffer.slice(data.byteOffset, data.byteOffset + data.byteLength) as ArrayBuffer;
  return new Uint8Array(await crypto.subtle.digest("SHA-256", buf));
}

// -- transaction payloads ----------------------------------------------------

export function signUpPayload(
  publicKey: Uint8Array,
  role: number,
  initialGrant: number,
  createdAt: number,
): Uint8Array {
  if (publicKey.length !== 32) throw new RangeError("public key must be 32 bytes");
  return concat(publicKey, u8(role), u64(initialGrant), u64(createdAt));
}

export function registerSensorPayload(
  metadata: Record<string, string>,
  price: number,
  period: number,
  schemaTag: string,
): Uint8Array {
  return concat(strMap(metadata), u64(price), u64(period), str(schemaTag));
}

export function subscribePayload(
  streamId: Uint8Array,
  start: number,
  expiry: number,
  paid: number,
): Uint8Array {
  if (streamId.length !== 32) throw new RangeError("stream id must be 32 bytes");
  return concat(streamId, u64(start), u64(expiry), u64(paid));
}

// -- transaction envelope ------------------------------------------------------

/** body = u8 kind || sender (32) || u64 sequence || payload; signed as a whole. */
export function txBody(
  kind: number,
  sender: Uint8Array,
  sequence: number,
  payload: Uint8Array,
): Uint8Array {
  if (sender.length !== 32) throw new RangeError("sender must be 32 bytes");
  return concat(u8(kind), sender, u64(sequence), payload);
}

export function encodeTransaction(
  body: Uint8Array,
  publicKey: Uint8Array,
  signature: Uint8Array,
): Uint8Array {
  if (publicKey.length !== 32) throw new RangeError("public key must be 32 bytes");
  if (signature.length !== 64) throw new RangeError("signature must be 64 bytes");
  return concat(vbytes(body), publicKey, signature);
}

export function txId(body: Uint8Array): Promise<Uint8Array> {
  return sha256(body);
}

/** Message a client signs to open a session: prefix || address || u64 timestamp. */
export function sessionChallenge(address: Uint8Array, timestamp: number): Uint8Array {
  if (address.length !== 32) throw new RangeError("address must be 32 bytes");
  return concat(new TextEncoder().encode(SESSION_CHALLENGE_PREFIX), address, u64(timestamp));
}
