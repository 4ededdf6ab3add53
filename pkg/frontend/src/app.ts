/** The portal single-page app: thin views over the node's HTTP API.
 *
 * Five panels — account, sensors, streams, deliveries, explorer — each a
 * direct rendering of documented endpoints. The app holds no business
 * logic beyond request signing and display: balances come verbatim from
 * the server, errors surface as banners, and the explorer re-reads the
 * ledger on a timer.
 */

import {
  ApiClient,
  humanizeError,
  type BlocksPage,
  type DeliveryResponse,
  type FetchLike,
  type NodeInfo,
  type PublishResponse,
  type SitesPage,
  type StreamView,
  type SubscribeResponse,
  type TxDetail,
} from "./api.js";
import { fromBase64, toHex } from "./codec.js";
import { generateKeyPair, keyPairFromSeedHex, seedHex } from "./keys.js";
import { PortalSession } from "./session.js";

export interface AppOptions {
  apiBase: string;
  fetchImpl?: FetchLike;
  /** Explorer auto-refresh period in milliseconds. */
  refreshMs?: number;
  now?: () => number;
}

const TABS = ["account", "sensors", "streams", "deliveries", "explorer"] as const;
type Tab = (typeof TABS)[number];

const PAGE_SIZE = 25;

export class PortalApp {
  readonly api: ApiClient;
  session: PortalSession | null = null;
  info: NodeInfo | null = null;

  private readonly doc: Document;
  private readonly now: () => number;
  private readonly refreshMs: number;
  private readonly els = new Map<string, HTMLElement>();
  private readonly subscriptions = new Map<string, SubscribeResponse>();
  private published: PublishResponse[] = [];
  private streams: StreamView[] = [];
  /** Explorer window; null follows the latest page on every refresh. */
  private page: { from: number; to: number } | null = null;
  private lastRange: { from: number; to: number } = { from: 0, to: 0 };
  private timer: ReturnType<typeof setInterval> | null = null;
  private busy = 0;

  constructor(
    readonly root: HTMLElement,
    opts: AppOptions,
  ) {
    this.doc = root.ownerDocument;
    this.api = new ApiClient(opts.apiBase, opts.fetchImpl);
    this.now = opts.now ?? (() => Math.floor(Date.now() / 1000));
    this.refreshMs = opts.refreshMs ?? 2000;
    this.buildSkeleton();
    this.showTab("account");
    this.timer = setInterval(() => void this.refreshLedger(), this.refreshMs);
    void this.refreshLedger();
    this.root.setAttribute("data-busy", "0");
  }

  dispose(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
  }

  // -- DOM helpers ---------------------------------------------------------------

  private h(
    tag: string,
    attrs: Record<string, string> = {},
    ...children: (Node | string)[]
  ): HTMLElement {
    const el = this.doc.createElement(tag);
    for (const [k, v] of Object.entries(attrs)) el.setAttribute(k, v);
    for (const child of children) {
      el.append(typeof child === "string" ? this.doc.createTextNode(child) : child);
    }
    return el;
  }

  private slot(testId: string, tag = "span", attrs: Record<string, string> = {}): HTMLElement {
    const el = this.h(tag, { ...attrs, "data-testid": testId });
    this.els.set(testId, el);
    return el;
  }

  el(testId: string): HTMLElement {
    const el = this.els.get(testId);
    if (!el) throw new Error(`no element ${testId}`);
    return el;
  }

  /** Run a UI action: track busyness, surface failures as a banner. */
  private async run(action: () => Promise<void>): Promise<void> {
    this.busy += 1;
    this.root.setAttribute("data-busy", String(this.busy));
    try {
      await action();
    } catch (err) {
      this.banner(humanizeError(err), true);
    } finally {
      this.busy -= 1;
      this.root.setAttribute("data-busy", String(this.busy));
    }
  }

  private banner(text: string, isError = false): void {
    const el = this.el("banner");
    el.textContent = text;
    el.setAttribute("data-kind", isError ? "error" : "ok");
  }

  // -- skeleton --------------------------------------------------------------------

  private buildSkeleton(): void {
    const header = this.h(
      "header",
      {},
      this.h("h1", {}, "datchain portal"),
      this.h(
        "div",
        { class: "whoami" },
        "address ",
        this.slot("address", "code"),
        " balance ",
        this.slot("balance", "strong"),
        " role ",
        this.slot("account-role"),
      ),
      this.slot("node-info", "div", { class: "nodeinfo" }),
    );
    const nav = this.h("nav", {});
    for (const tab of TABS) {
      const btn = this.h("button", { "data-tab": tab }, tab);
      btn.addEventListener("click", () => this.showTab(tab));
      nav.append(btn);
    }
    const banner = this.slot("banner", "div", { class: "banner", role: "status" });
    this.root.append(
      header,
      nav,
      banner,
      this.buildAccountPanel(),
      this.buildSensorsPanel(),
      this.buildStreamsPanel(),
      this.buildDeliveriesPanel(),
      this.buildExplorerPanel(),
    );
    this.renderAccount();
  }

  private panel(tab: Tab, ...children: (Node | string)[]): HTMLElement {
    const el = this.h("section", { "data-panel": tab }, ...children);
    el.hidden = true;
    return el;
  }

  private showTab(tab: Tab): void {
    for (const section of this.root.querySelectorAll<HTMLElement>("[data-panel]")) {
      section.hidden = section.getAttribute("data-panel") !== tab;
    }
  }

  private button(testId: string, label: string, onClick: () => Promise<void>): HTMLElement {
    const btn = this.slot(testId, "button");
    btn.textContent = label;
    btn.addEventListener("click", () => void this.run(onClick));
    return btn;
  }

  private input(testId: string, attrs: Record<string, string> = {}): HTMLInputElement {
    return this.slot(testId, "input", attrs) as HTMLInputElement;
  }

  private value(testId: string): string {
    return (this.el(testId) as HTMLInputElement).value.trim();
  }

  // -- account panel ----------------------------------------------------------------

  private buildAccountPanel(): HTMLElement {
    const roleSelect = this.slot("role-select", "select") as HTMLSelectElement;
    for (const role of ["owner", "buyer", "both"]) {
      roleSelect.append(this.h("option", { value: role }, role));
    }
    roleSelect.value = "both";
    return this.panel(
      "account",
      this.h(
        "fieldset",
        {},
        this.h("legend", {}, "keypair"),
        this.button("generate-key", "generate keypair", () => this.generateKeys()),
        this.h(
          "label",
          {},
          "seed (hex) ",
          this.input("seed-input", { type: "password", placeholder: "64 hex chars" }),
        ),
        this.button("import-seed", "import seed", () => this.importSeed()),
        this.h("p", {}, "current seed: ", this.slot("seed-display", "code")),
      ),
      this.h(
        "fieldset",
        {},
        this.h("legend", {}, "sign up / sign in"),
        this.h("label", {}, "role ", roleSelect),
        this.button("signup", "sign up", () => this.signUp()),
        this.button("signin", "sign in", () => this.signIn()),
        this.button("refresh-account", "refresh", () => this.refreshAccount()),
      ),
      this.h(
        "dl",
        {},
        this.h("dt", {}, "created"),
        this.h("dd", {}, this.slot("account-created")),
        this.h("dt", {}, "next sequence"),
        this.h("dd", {}, this.slot("next-sequence")),
      ),
    );
  }

  private async generateKeys(): Promise<void> {
    this.session = new PortalSession(this.api, await generateKeyPair(), this.now);
    this.renderAccount();
    this.banner("keypair generated — save the seed before signing up");
  }

  private async importSeed(): Promise<void> {
    const keys = await keyPairFromSeedHex(this.value("seed-input"));
    this.session = new PortalSession(this.api, keys, this.now);
    this.renderAccount();
    this.banner("keypair imported");
  }

  private requireSession(): PortalSession {
    if (!this.session) throw new Error("generate or import a keypair first");
    return this.session;
  }

  private async signUp(): Promise<void> {
    const session = this.requireSession();
    const role = (this.el("role-select") as HTMLSelectElement).value;
    const response = await session.signUp(role);
    this.renderAccount();
    this.banner(`account created — tx ${response.tx_id.slice(0, 16)}… at ${response.location}`);
  }

  private async signIn(): Promise<void> {
    const session = this.requireSession();
    await session.signIn();
    this.renderAccount();
    this.banner("signed in");
  }

  private async refreshAccount(): Promise<void> {
    await this.requireSession().refresh();
    this.renderAccount();
  }

  private renderAccount(): void {
    const session = this.session;
    const account = session?.account ?? null;
    this.el("address").textContent = session ? session.addressHex : "—";
    this.el("seed-display").textContent = session ? seedHex(session.keys) : "—";
    this.el("balance").textContent = account ? String(account.balance) : "—";
    this.el("account-role").textContent = account ? account.role : "—";
    this.el("account-created").textContent = account
      ? new Date(account.created_at * 1000).toISOString()
      : "—";
    this.el("next-sequence").textContent = account ? String(account.next_sequence) : "—";
  }

  // -- sensors panel -----------------------------------------------------------------

  private buildSensorsPanel(): HTMLElement {
    return this.panel(
      "sensors",
      this.h(
        "fieldset",
        {},
        this.h("legend", {}, "register sensor"),
        this.h(
          "label",
          {},
          "metadata (key=value per line) ",
          this.slot("sensor-metadata", "textarea"),
        ),
        this.h("label", {}, "price ", this.input("sensor-price", { type: "number", value: "10" })),
        this.h(
          "label",
          {},
          "period (s) ",
          this.input("sensor-period", { type: "number", value: "3600" }),
        ),
        this.h("label", {}, "schema tag ", this.input("sensor-schema", { value: "v1" })),
        this.button("register-sensor", "register", () => this.registerSensor()),
      ),
      this.h(
        "fieldset",
        {},
        this.h("legend", {}, "publish reading"),
        this.h("label", {}, "sensor ", this.slot("publish-sensor", "select")),
        this.h("label", {}, "payload ", this.slot("publish-payload", "textarea")),
        this.button("publish", "publish", () => this.publishReading()),
      ),
      this.h("h3", {}, "my sensors"),
      this.slot("sensor-list", "ul"),
      this.h("h3", {}, "published this session"),
      this.slot("published-list", "ul"),
    );
  }

  private parseMetadata(text: string): Record<string, string> {
    const metadata: Record<string, string> = {};
    for (const line of text.split("\n")) {
      const trimmed = line.trim();
      if (!trimmed) continue;
      const eq = trimmed.indexOf("=");
      if (eq < 1) throw new Error(`metadata line is not key=value: ${trimmed}`);
      metadata[trimmed.slice(0, eq).trim()] = trimmed.slice(eq + 1).trim();
    }
    return metadata;
  }

  private async registerSensor(): Promise<void> {
    const session = this.requireSession();
    const metadata = this.parseMetadata((this.el("sensor-metadata") as HTMLTextAreaElement).value);
    const price = Number(this.value("sensor-price"));
    const period = Number(this.value("sensor-period"));
    const response = await session.registerSensor(metadata, price, period, this.value("sensor-schema"));
    this.renderAccount();
    await this.refreshStreams();
    this.banner(`sensor registered — ${response.sensor_id.slice(0, 16)}… at ${response.location}`);
  }

  private async publishReading(): Promise<void> {
    const session = this.requireSession();
    const sensorId = (this.el("publish-sensor") as HTMLSelectElement).value;
    if (!sensorId) throw new Error("register a sensor first");
    const payload = new TextEncoder().encode(
      (this.el("publish-payload") as HTMLTextAreaElement).value,
    );
    const response = await session.publish(sensorId, payload);
    this.published.push(response);
    this.renderAccount();
    this.renderPublished();
    this.banner(`published — envelope ${response.envelope_id.slice(0, 16)}… at ${response.location}`);
  }

  private renderMySensors(): void {
    const me = this.session?.addressHex;
    const mine = this.streams.filter((s) => s.owner === me);
    const list = this.el("sensor-list");
    const select = this.el("publish-sensor") as HTMLSelectElement;
    const keep = select.value;
    list.textContent = "";
    select.textContent = "";
    for (const stream of mine) {
      list.append(
        this.h(
          "li",
          { "data-sensor": stream.sensor_id },
          this.h("code", {}, stream.sensor_id.slice(0, 16) + "…"),
          ` price ${stream.price}, period ${stream.period}s`,
        ),
      );
      select.append(this.h("option", { value: stream.sensor_id }, stream.sensor_id.slice(0, 16) + "…"));
    }
    select.value = mine.some((s) => s.sensor_id === keep) ? keep : (mine[0]?.sensor_id ?? "");
  }

  private renderPublished(): void {
    const list = this.el("published-list");
    list.textContent = "";
    for (const pub of this.published) {
      const use = this.h("button", { "data-fetch": pub.envelope_id }, "fetch");
      use.addEventListener("click", () =>
        void this.run(async () => {
          (this.el("envelope-input") as HTMLInputElement).value = pub.envelope_id;
          this.showTab("deliveries");
          await this.fetchDelivery();
        }),
      );
      list.append(
        this.h(
          "li",
          { "data-envelope": pub.envelope_id },
          this.h("code", {}, pub.envelope_id),
          ` captured ${new Date(pub.captured_at * 1000).toISOString()} `,
          use,
        ),
      );
    }
  }

  // -- streams panel ------------------------------------------------------------------

  private buildStreamsPanel(): HTMLElement {
    const table = this.slot("stream-table", "table");
    table.append(
      this.h(
        "thead",
        {},
        this.h(
          "tr",
          {},
          this.h("th", {}, "stream"),
          this.h("th", {}, "metadata"),
          this.h("th", {}, "price"),
          this.h("th", {}, "period"),
          this.h("th", {}, "owner"),
          this.h("th", {}, ""),
        ),
      ),
      this.h("tbody", {}),
    );
    return this.panel(
      "streams",
      this.button("refresh-streams", "refresh catalog", () => this.refreshStreams()),
      table,
    );
  }

  private async refreshStreams(): Promise<void> {
    this.streams = (await this.api.streams()).streams;
    this.renderStreams();
    this.renderMySensors();
  }

  private renderStreams(): void {
    const body = this.el("stream-table").querySelector("tbody");
    if (!body) return;
    body.textContent = "";
    const me = this.session?.addressHex;
    const nowTs = this.now();
    for (const stream of this.streams) {
      const sub = this.subscriptions.get(stream.stream_id);
      const active = sub !== undefined && sub.start <= nowTs && nowTs < sub.expiry;
      const action = this.doc.createElement("td");
      if (me && stream.owner === me) {
        action.append(this.h("em", {}, "your stream"));
      } else {
        const btn = this.h("button", { "data-subscribe": stream.stream_id }, "subscribe");
        btn.addEventListener("click", () => void this.run(() => this.subscribeTo(stream)));
        action.append(btn);
      }
      if (active) {
        action.append(
          this.h(
            "span",
            { "data-active": stream.stream_id, class: "badge" },
            ` active until ${new Date(sub.expiry * 1000).toISOString()}`,
          ),
        );
      }
      const metadata = Object.entries(stream.metadata)
        .map(([k, v]) => `${k}=${v}`)
        .join(", ");
      body.append(
        this.h(
          "tr",
          { "data-stream": stream.stream_id },
          this.h("td", {}, this.h("code", {}, stream.stream_id.slice(0, 16) + "…")),
          this.h("td", {}, metadata),
          this.h("td", { class: "price" }, String(stream.price)),
          this.h("td", {}, `${stream.period}s`),
          this.h("td", {}, this.h("code", {}, stream.owner.slice(0, 16) + "…")),
          action,
        ),
      );
    }
  }

  private async subscribeTo(stream: StreamView): Promise<void> {
    const session = this.requireSession();
    const response = await session.subscribe(stream);
    this.subscriptions.set(stream.stream_id, response);
    this.renderAccount();
    this.renderStreams();
    this.banner(
      `subscribed until ${new Date(response.expiry * 1000).toISOString()} — paid ${response.paid}`,
    );
  }

  // -- deliveries panel ----------------------------------------------------------------

  private buildDeliveriesPanel(): HTMLElement {
    return this.panel(
      "deliveries",
      this.h(
        "fieldset",
        {},
        this.h("legend", {}, "fetch delivery"),
        this.h("label", {}, "envelope id ", this.input("envelope-input", { size: "64" })),
        this.button("fetch-envelope", "fetch", () => this.fetchDelivery()),
      ),
      this.slot("delivery", "div", { class: "delivery" }),
    );
  }

  private async fetchDelivery(): Promise<void> {
    const session = this.requireSession();
    const envelopeId = this.value("envelope-input");
    const response = await session.download(envelopeId);
    this.renderAccount();
    this.renderDelivery(response);
    this.banner(`delivered ${envelopeId.slice(0, 16)}…`);
  }

  private renderDelivery(delivery: DeliveryResponse): void {
    const bytes = fromBase64(delivery.payload);
    let text: string;
    try {
      text = new TextDecoder("utf-8", { fatal: true }).decode(bytes);
    } catch {
      text = `(binary, ${bytes.length} bytes)`;
    }
    const card = this.el("delivery");
    card.textContent = "";
    const download = this.h(
      "a",
      {
        "data-testid": "delivery-download",
        href: `data:application/octet-stream;base64,${delivery.payload}`,
        download: `${delivery.envelope_id.slice(0, 16)}.bin`,
      },
      "download payload",
    );
    card.append(
      this.h("p", {}, "envelope ", this.h("code", {}, delivery.envelope_id)),
      this.h("pre", { "data-testid": "delivery-payload" }, text),
      this.h(
        "p",
        {},
        "watermark tag ",
        this.h("code", { "data-testid": "delivery-tag" }, delivery.watermark_tag),
      ),
      this.h(
        "p",
        {},
        "subscription ",
        this.h("code", {}, delivery.sub_id ?? "none (own stream)"),
        " tx ",
        this.h("code", { "data-testid": "delivery-tx" }, delivery.tx_id ?? "none"),
        " at ",
        this.h("span", { "data-testid": "delivery-location" }, delivery.location ?? "—"),
      ),
      this.h("p", {}, download),
    );
  }

  // -- explorer panel ------------------------------------------------------------------

  private buildExplorerPanel(): HTMLElement {
    const older = this.h("button", { "data-testid": "page-older" }, "older");
    older.addEventListener("click", () => void this.run(() => this.pageOlder()));
    const newer = this.h("button", { "data-testid": "page-newer" }, "latest");
    newer.addEventListener("click", () =>
      void this.run(async () => {
        this.page = null;
        await this.refreshLedger();
      }),
    );
    return this.panel(
      "explorer",
      this.h(
        "p",
        {},
        "ledger ",
        this.slot("ledger-mode", "code"),
        " height ",
        this.slot("ledger-height", "strong"),
        " ",
        this.button("refresh-ledger", "refresh", () => this.refreshLedger()),
        older,
        newer,
      ),
      this.slot("block-list", "ul", { class: "ledger" }),
      this.slot("tx-detail", "div", { class: "txdetail" }),
    );
  }

  private async pageOlder(): Promise<void> {
    const { from } = this.page ?? this.lastRange;
    this.page = { from: Math.max(0, from - PAGE_SIZE), to: Math.max(1, from) };
    await this.refreshLedger();
  }

  private async refreshLedger(): Promise<void> {
    try {
      this.info = await this.api.info();
      this.renderNodeInfo();
      if (this.info.ledger_mode === "chain") {
        const page = await this.api.blocks(this.page?.from, this.page?.to);
        this.lastRange = { from: page.from, to: page.to };
        this.renderBlocks(page);
      } else {
        const page = await this.api.sites(this.page?.from, this.page?.to);
        this.lastRange = { from: page.from, to: page.to };
        this.renderSites(page);
      }
    } catch (err) {
      this.el("node-info").textContent = `node unreachable: ${humanizeError(err)}`;
    }
  }

  private renderNodeInfo(): void {
    if (!this.info) return;
    this.el("node-info").textContent =
      `${this.info.chain_id} — ${this.info.ledger_mode}/${this.info.engine}, height ${this.info.height}`;
    this.el("ledger-mode").textContent = this.info.ledger_mode;
    this.el("ledger-height").textContent = String(this.info.height);
  }

  private txLine(tx: { tx_id: string; kind: string; sender: string; sequence: number }): HTMLElement {
    const btn = this.h(
      "button",
      { "data-tx": tx.tx_id },
      `${tx.kind} #${tx.sequence} from ${tx.sender.slice(0, 12)}…`,
    );
    btn.addEventListener("click", () => void this.run(() => this.showTx(tx.tx_id)));
    return btn;
  }

  private renderBlocks(page: BlocksPage): void {
    const list = this.el("block-list");
    list.textContent = "";
    for (const block of [...page.blocks].reverse()) {
      const item = this.h(
        "li",
        { "data-block": String(block.index) },
        this.h("strong", {}, `#${block.index}`),
        " ",
        this.h("code", {}, block.hash.slice(0, 16) + "…"),
        ` nonce ${block.nonce}, ${block.transactions.length} tx `,
      );
      for (const tx of block.transactions) item.append(this.txLine(tx));
      list.append(item);
    }
  }

  private renderSites(page: SitesPage): void {
    const list = this.el("block-list");
    list.textContent = "";
    for (const site of [...page.sites].reverse()) {
      const item = this.h(
        "li",
        { "data-site": String(site.ordinal) },
        this.h("strong", {}, `site ${site.ordinal}`),
        " ",
        this.h("code", {}, site.site_id.slice(0, 16) + "…"),
        ` parents ${site.parent_a.slice(0, 8)}…/${site.parent_b.slice(0, 8)}… `,
      );
      if (site.transaction) item.append(this.txLine(site.transaction));
      else item.append(this.h("em", {}, "genesis"));
      list.append(item);
    }
  }

  private async showTx(txIdHex: string): Promise<void> {
    const detail: TxDetail = await this.api.tx(txIdHex);
    const card = this.el("tx-detail");
    card.textContent = "";
    card.append(
      this.h("h3", {}, `${detail.kind} transaction`),
      this.h(
        "dl",
        {},
        this.h("dt", {}, "tx id"),
        this.h("dd", {}, this.h("code", {}, detail.tx_id)),
        this.h("dt", {}, "sender"),
        this.h("dd", {}, this.h("code", {}, detail.sender)),
        this.h("dt", {}, "sequence"),
        this.h("dd", {}, String(detail.sequence)),
        this.h("dt", {}, "location"),
        this.h("dd", { "data-testid": "tx-detail-location" }, detail.location),
        this.h("dt", {}, "payload (base64)"),
        this.h("dd", {}, this.h("code", {}, detail.payload)),
      ),
    );
  }
}

export function createApp(root: HTMLElement, opts: AppOptions): PortalApp {
  return new PortalApp(root, opts);
}

export { toHex };
