/** Typed client for the node's HTTP API (docs/API.md); no business logic. */

export interface AccountView {
  address: string;
  role: string;
  balance: number;
  created_at: number;
  next_sequence: number;
}

export interface CreateAccountResponse {
  account: AccountView;
  token: string;
  tx_id: string;
  location: string;
}

export interface SessionResponse {
  token: string;
  address: string;
}

export interface RegisterSensorResponse {
  sensor_id: string;
  stream_id: string;
  tx_id: string;
  location: string;
}

export interface StreamView {
  stream_id: string;
  sensor_id: string;
  owner: string;
  price: number;
  period: number;
  schema_tag: string;
  metadata: Record<string, string>;
}

export interface PublishResponse {
  envelope_id: string;
  sensor_id: string;
  captured_at: number;
  tx_id: string;
  location: string;
}

export interface DeliveryResponse {
  envelope_id: string;
  payload: string;
  watermark_tag: string;
  sub_id: string | null;
  tx_id: string | null;
  location: string | null;
}

export interface SubscribeResponse {
  sub_id: string;
  stream_id: string;
  start: number;
  expiry: number;
  paid: number;
  watermark_key_id: string;
  balance: number;
  tx_id: string;
  location: string;
}

export interface TxView {
  tx_id: string;
  kind: string;
  sender: string;
  sequence: number;
}

export interface BlockView {
  index: number;
  hash: string;
  prev_hash: string;
  timestamp: number;
  nonce: number;
  tx_root: string;
  transactions: TxView[];
}

export interface BlocksPage {
  height: number;
  from: number;
  to: number;
  blocks: BlockView[];
}

export interface SiteView {
  ordinal: number;
  site_id: string;
  parent_a: string;
  parent_b: string;
  nonce: number;
  transaction: TxView | null;
}

export interface SitesPage {
  count: number;
  from: number;
  to: number;
  sites: SiteView[];
}

export interface TxDetail extends TxView {
  public_key: string;
  payload: string;
  signature: string;
  location: string;
}

export interface NodeInfo {
  chain_id: string;
  ledger_mode: string;
  engine: string;
  height: number;
  initial_grant: number;
  operator: string;
  ledger_digest: string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly error: string,
    readonly detail: string,
  ) {
    super(`${error}: ${detail}`);
  }
}

/** Short banner text for an error; fixed phrases for the common refusals. */
export function humanizeError(err: unknown): string {
  if (err instanceof ApiError) {
    if (err.status === 402) return "insufficient funds";
    if (err.status === 403) return "no active subscription";
    if (err.status === 401) return "session expired — sign in again";
    return `${err.error}: ${err.detail}`;
  }
  return err instanceof Error ? err.message : String(err);
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    readonly base: string,
    private readonly fetchImpl: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
    token?: string | null,
  ): Promise<T> {
    const headers: Record<string, string> = {};
    if (body !== undefined) headers["Content-Type"] = "application/json";
    if (token) headers["Authorization"] = `Bearer ${token}`;
    const response = await this.fetchImpl(this.base + path, {
      method,
      headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const text = await response.text();
    let data: unknown = null;
    try {
      data = text ? JSON.parse(text) : null;
    } catch {
      data = null;
    }
    if (!response.ok) {
      const err = (data ?? {}) as { error?: string; detail?: string };
      throw new ApiError(
        response.status,
        err.error ?? `HTTP ${response.status}`,
        err.detail ?? text.slice(0, 200),
      );
    }
    return data as T;
  }

  info(): Promise<NodeInfo> {
    return this.request("GET", "/info");
  }

  metrics(): Promise<Record<string, number>> {
    return this.request("GET", "/metrics");
  }

  createAccount(txB64: string): Promise<CreateAccountResponse> {
    return this.request("POST", "/accounts", { tx: txB64 });
  }

  createSession(address: string, timestamp: number, signatureB64: string): Promise<SessionResponse> {
    return this.request("POST", "/sessions", { address, timestamp, signature: signatureB64 });
  }

  account(address: string): Promise<AccountView> {
    return this.request("GET", `/accounts/${address}`);
  }

  registerSensor(txB64: string, token: string): Promise<RegisterSensorResponse> {
    return this.request("POST", "/sensors", { tx: txB64 }, token);
  }

  streams(): Promise<{ streams: StreamView[] }> {
    return this.request("GET", "/streams");
  }

  publish(
    sensorId: string,
    payloadB64: string,
    capturedAt: number,
    token: string,
  ): Promise<PublishResponse> {
    return this.request(
      "POST",
      "/data",
      { sensor_id: sensorId, payload: payloadB64, captured_at: capturedAt },
      token,
    );
  }

  delivery(envelopeId: string, token: string): Promise<DeliveryResponse> {
    return this.request("GET", `/data/${envelopeId}`, undefined, token);
  }

  subscribe(txB64: string, token: string): Promise<SubscribeResponse> {
    return this.request("POST", "/subscriptions", { tx: txB64 }, token);
  }

  blocks(from?: number, to?: number): Promise<BlocksPage> {
    return this.request("GET", `/ledger/blocks${pageQuery(from, to)}`);
  }

  sites(from?: number, to?: number): Promise<SitesPage> {
    return this.request("GET", `/ledger/sites${pageQuery(from, to)}`);
  }

  tx(txIdHex: string): Promise<TxDetail> {
    return this.request("GET", `/ledger/tx/${txIdHex}`);
  }
}

function pageQuery(from?: number, to?: number): string {
  const params = new URLSearchParams();
  if (from !== undefined) params.set("from", String(from));
  if (to !== undefined) params.set("to", String(to));
  const s = params.toString();
  return s ? `?${s}` : "";
}
