/** Client-side Ed25519 identities; private keys never leave the browser. */

import * as ed from "@noble/ed25519";

import { fromHex, sha256, toHex } from "./codec.js";

export interface KeyPair {
  /** 32-byte Ed25519 seed; keep secret, never sent anywhere. */
  seed: Uint8Array;
  publicKey: Uint8Array;
  /** SHA-256 of the public key; the account identifier on the ledger. */
  address: Uint8Array;
}

export async function keyPairFromSeed(seed: Uint8Array): Promise<KeyPair> {
  if (seed.length !== 32) throw new RangeError("seed must be 32 bytes");
  const publicKey = await ed.getPublicKeyAsync(seed);
  return { seed, publicKey, address: await sha256(publicKey) };
}

export async function keyPairFromSeedHex(seedHex: string): Promise<KeyPair> {
  return keyPairFromSeed(fromHex(seedHex.trim(), 32));
}

export function generateKeyPair(): Promise<KeyPair> {
  const seed = new Uint8Array(32);
  crypto.getRandomValues(seed);
  return keyPairFromSeed(seed);
}

export function sign(keys: KeyPair, message: Uint8Array): Promise<Uint8Array> {
  return ed.signAsync(message, keys.seed);
}

export function verify(
  publicKey: Uint8Array,
  signature: Uint8Array,
  message: Uint8Array,
): Promise<boolean> {
  return ed.verifyAsync(signature, message, publicKey);
}

export function seedHex(keys: KeyPair): string {
  return toHex(keys.seed);
}
