/** A signed-in identity: address, bearer token, and the cached balance.
 *
 * Every mutating call attaches the token, and the balance cache is
 * refreshed from GET /accounts after each mutation — the server is the
 * only source of truth for displayed numbers. Mutations are serialized
 * so sequence numbers never race.
 */

import {
  ApiClient,
  type AccountView,
  type CreateAccountResponse,
  type DeliveryResponse,
  type PublishResponse,
  type RegisterSensorResponse,
  type StreamView,
  type SubscribeResponse,
} from "./api.js";
import {
  ROLE_CODES,
  TX_REGISTER_SENSOR,
  TX_SIGN_UP,
  TX_SUBSCRIBE,
  encodeTransaction,
  registerSensorPayload,
  sessionChallenge,
  signUpPayload,
  subscribePayload,
  toBase64,
  toHex,
  fromHex,
  txBody,
} from "./codec.js";
import { sign, type KeyPair } from "./keys.js";

export class PortalSession {
  token: string | null = null;
  /** Last account view fetched from the server; balance shown verbatim. */
  account: AccountView | null = null;
  private queue: Promise<void> = Promise.resolve();

  constructor(
    readonly api: ApiClient,
    readonly keys: KeyPair,
    private readonly now: () => number = () => Math.floor(Date.now() / 1000),
  ) {}

  get addressHex(): string {
    return toHex(this.keys.address);
  }

  get balance(): number | null {
    return this.account ? this.account.balance : null;
  }

  private serialize<T>(op: () => Promise<T>): Promise<T> {
    const result = this.queue.then(op, op);
    this.queue = result.then(
      () => undefined,
      () => undefined,
    );
    return result;
  }

  private requireToken(): string {
    if (!this.token) throw new Error("not signed in");
    return this.token;
  }

  /** Re-read the account view; the only way displayed balances change. */
  async refresh(): Promise<AccountView> {
    this.account = await this.api.account(this.addressHex);
    return this.account;
  }

  private async signedTx(kind: number, payload: Uint8Array): Promise<string> {
    const sequence = (await this.api.account(this.addressHex)).next_sequence;
    const body = txBody(kind, this.keys.address, sequence, payload);
    const signature = await sign(this.keys, body);
    return toBase64(encodeTransaction(body, this.keys.publicKey, signature));
  }

  signUp(role: string): Promise<CreateAccountResponse> {
    return this.serialize(async () => {
      const code = ROLE_CODES[role];
      if (code === undefined) throw new Error(`unknown role ${role}`);
      const grant = (await this.api.info()).initial_grant;
      const payload = signUpPayload(this.keys.publicKey, code, grant, this.now());
      const body = txBody(TX_SIGN_UP, this.keys.address, 1, payload);
      const signature = await sign(this.keys, body);
      const response = await this.api.createAccount(
        toBase64(encodeTransaction(body, this.keys.publicKey, signature)),
      );
      this.token = response.token;
      this.account = response.account;
      await this.refresh();
      return response;
    });
  }

  /** Challenge sign-in for an existing account; no ledger traffic. */
  signIn(): Promise<void> {
    return this.serialize(async () => {
      const timestamp = this.now();
      const signature = await sign(this.keys, sessionChallenge(this.keys.address, timestamp));
      const response = await this.api.createSession(
        this.addressHex,
        timestamp,
        toBase64(signature),
      );
      this.token = response.token;
      await this.refresh();
    });
  }

  registerSensor(
    metadata: Record<string, string>,
    price: number,
    period: number,
    schemaTag: string,
  ): Promise<RegisterSensorResponse> {
    return this.serialize(async () => {
      const token = this.requireToken();
      const tx = await this.signedTx(
        TX_REGISTER_SENSOR,
        registerSensorPayload(metadata, price, period, schemaTag),
      );
      const response = await this.api.registerSensor(tx, token);
      await this.refresh();
      return response;
    });
  }

  publish(sensorIdHex: string, payload: Uint8Array, capturedAt?: number): Promise<PublishResponse> {
    return this.serialize(async () => {
      const token = this.requireToken();
      const response = await this.api.publish(
        sensorIdHex,
        toBase64(payload),
        capturedAt ?? this.now(),
        token,
      );
      await this.refresh();
      return response;
    });
  }

  /** Buy a stream: start now, expiry one period later, pay the listed price. */
  subscribe(stream: StreamView): Promise<SubscribeResponse> {
    return this.serialize(async () => {
      const token = this.requireToken();
      const start = this.now();
      const tx = await this.signedTx(
        TX_SUBSCRIBE,
        subscribePayload(fromHex(stream.stream_id, 32), start, start + stream.period, stream.price),
      );
      const response = await this.api.subscribe(tx, token);
      await this.refresh();
      return response;
    });
  }

  download(envelopeIdHex: string): Promise<DeliveryResponse> {
    return this.serialize(async () => {
      const token = this.requireToken();
      const response = await this.api.delivery(envelopeIdHex, token);
      await this.refresh();
      return response;
    });
  }
}
