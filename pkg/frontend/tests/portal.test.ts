// The scripted browser flow against a live local node: sign-up, sensor
// registration, subscribe, download, explorer refresh — asserting after
// every step that the balance on screen equals GET /accounts.
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { generateKeyPair } from "../src/keys.js";
import { PortalSession } from "../src/session.js";
import {
  act,
  fill,
  openTab,
  q,
  settled,
  startNode,
  text,
  waitFor,
  type LiveNode,
  type Tab,
} from "./harness.js";

async function balanceShownMatchesServer(tab: Tab, base: string): Promise<void> {
  const address = text(tab.root, "address");
  const account = await new ApiClient(base).account(address);
  expect(text(tab.root, "balance")).toBe(String(account.balance));
}

describe("portal against a live chain node", () => {
  let node: LiveNode;
  let api: ApiClient;

  beforeAll(async () => {
    node = await startNode("chain");
    api = new ApiClient(node.base);
  });

  afterAll(async () => {
    await node.stop();
  });

  it("completes the scripted flow with server-matching balances", async () => {
    const owner = openTab(node.base);
    const buyer = openTab(node.base);
    try {
      // owner signs up
      await act(owner, "generate-key");
      expect(text(owner.root, "address")).toMatch(/^[0-9a-f]{64}$/);
      (q(owner.root, "role-select") as HTMLSelectElement).value = "owner";
      await act(owner, "signup");
      expect(text(owner.root, "banner")).toContain("account created");
      expect(text(owner.root, "balance")).toBe("100");
      await balanceShownMatchesServer(owner, node.base);

      // owner registers a sensor
      (q(owner.root, "sensor-metadata") as HTMLTextAreaElement).value = "kind=temp\nloc=lab";
      fill(owner.root, "sensor-price", "30");
      fill(owner.root, "sensor-period", "3600");
      fill(owner.root, "sensor-schema", "v1");
      await act(owner, "register-sensor");
      expect(text(owner.root, "banner")).toContain("sensor registered");
      expect(owner.root.querySelectorAll("[data-sensor]")).toHaveLength(1);
      await balanceShownMatchesServer(owner, node.base);

      // owner publishes a reading
      (q(owner.root, "publish-payload") as HTMLTextAreaElement).value = "hello from the lab";
      await act(owner, "publish");
      expect(text(owner.root, "banner")).toContain("published");
      const envelopeId = owner.root
        .querySelector("[data-envelope]")!
        .getAttribute("data-envelope")!;
      expect(envelopeId).toMatch(/^[0-9a-f]{64}$/);
      await balanceShownMatchesServer(owner, node.base);

      // buyer signs up
      await act(buyer, "generate-key");
      (q(buyer.root, "role-select") as HTMLSelectElement).value = "buyer";
      await act(buyer, "signup");
      expect(text(buyer.root, "balance")).toBe("100");
      await balanceShownMatchesServer(buyer, node.base);

      // buyer browses the catalog and subscribes
      await act(buyer, "refresh-streams");
      const row = buyer.root.querySelector("[data-stream]");
      expect(row).toBeTruthy();
      expect(row!.querySelector(".price")!.textContent).toBe("30");
      (buyer.root.querySelector("[data-subscribe]") as HTMLButtonElement).click();
      await settled(buyer);
      expect(text(buyer.root, "banner")).toContain("subscribed until");
      expect(text(buyer.root, "balance")).toBe("70");
      expect(buyer.root.querySelector("[data-active]")).toBeTruthy();
      await balanceShownMatchesServer(buyer, node.base);

      // buyer downloads the delivery
      fill(buyer.root, "envelope-input", envelopeId);
      await act(buyer, "fetch-envelope");
      expect(text(buyer.root, "delivery-payload")).toBe("hello from the lab");
      expect(text(buyer.root, "delivery-tag").length).toBeGreaterThan(0);
      const location = text(buyer.root, "delivery-location");
      expect(location).toMatch(/^block:\d+$/);
      expect(q(buyer.root, "delivery-download").getAttribute("href")).toContain("base64");
      await balanceShownMatchesServer(buyer, node.base);

      // buyer refreshes the explorer: the delivery's block and tx are visible
      await act(buyer, "refresh-ledger");
      const info = await api.info();
      expect(text(buyer.root, "ledger-height")).toBe(String(info.height));
      const blockIndex = location.split(":")[1]!;
      expect(buyer.root.querySelector(`[data-block="${blockIndex}"]`)).toBeTruthy();
      const deliveryTx = text(buyer.root, "delivery-tx");
      const txButton = buyer.root.querySelector(`[data-tx="${deliveryTx}"]`);
      expect(txButton).toBeTruthy();
      (txButton as HTMLButtonElement).click();
      await settled(buyer);
      expect(text(buyer.root, "tx-detail-location")).toBe(location);
      await balanceShownMatchesServer(buyer, node.base);

      // the owner's tab re-reads the server and shows the payment
      await act(owner, "refresh-account");
      expect(text(owner.root, "balance")).toBe("130");
      await balanceShownMatchesServer(owner, node.base);
    } finally {
      owner.dispose();
      buyer.dispose();
    }
  });

  it("shows new commits within one auto-refresh interval", async () => {
    const watcher = openTab(node.base, 100);
    try {
      await waitFor(() => text(watcher.root, "ledger-height") !== "", "initial ledger load");
      const before = Number(text(watcher.root, "ledger-height"));
      const session = new PortalSession(new ApiClient(node.base), await generateKeyPair());
      await session.signUp("both");
      await waitFor(
        () => Number(text(watcher.root, "ledger-height")) === before + 1,
        "height to advance",
        5_000,
      );
      expect(watcher.root.querySelector(`[data-block="${before + 1}"]`)).toBeTruthy();
    } finally {
      watcher.dispose();
    }
  });

  it("surfaces insufficient funds as a banner with no state change", async () => {
    const ownerSession = new PortalSession(new ApiClient(node.base), await generateKeyPair());
    await ownerSession.signUp("owner");
    const listing = await ownerSession.registerSensor({ kind: "gold" }, 10_000, 3600, "v1");

    const buyer = openTab(node.base);
    try {
      await act(buyer, "generate-key");
      await act(buyer, "signup");
      await act(buyer, "refresh-streams");
      const button = buyer.root.querySelector(`[data-subscribe="${listing.stream_id}"]`);
      expect(button).toBeTruthy();
      (button as HTMLButtonElement).click();
      await settled(buyer);
      expect(text(buyer.root, "banner")).toBe("insufficient funds");
      expect(text(buyer.root, "balance")).toBe("100");
      expect(buyer.root.querySelector(`[data-active="${listing.stream_id}"]`)).toBeNull();
      await balanceShownMatchesServer(buyer, node.base);
    } finally {
      buyer.dispose();
    }
  });

  it("surfaces a missing subscription as a banner", async () => {
    const ownerSession = new PortalSession(new ApiClient(node.base), await generateKeyPair());
    await ownerSession.signUp("owner");
    const listing = await ownerSession.registerSensor({ kind: "secret" }, 5, 3600, "v1");
    const pub = await ownerSession.publish(
      listing.sensor_id,
      new TextEncoder().encode("classified"),
    );

    const tab = openTab(node.base);
    try {
      await act(tab, "generate-key");
      await act(tab, "signup");
      fill(tab.root, "envelope-input", pub.envelope_id);
      await act(tab, "fetch-envelope");
      expect(text(tab.root, "banner")).toBe("no active subscription");
      await balanceShownMatchesServer(tab, node.base);
    } finally {
      tab.dispose();
    }
  });

  it("imports a saved seed and signs in with a challenge", async () => {
    const first = openTab(node.base);
    let seed = "";
    let address = "";
    try {
      await act(first, "generate-key");
      seed = text(first.root, "seed-display");
      address = text(first.root, "address");
      await act(first, "signup");
    } finally {
      first.dispose();
    }

    const second = openTab(node.base);
    try {
      fill(second.root, "seed-input", seed);
      await act(second, "import-seed");
      expect(text(second.root, "address")).toBe(address);
      await act(second, "signin");
      expect(text(second.root, "banner")).toBe("signed in");
      expect(text(second.root, "balance")).toBe("100");
      await balanceShownMatchesServer(second, node.base);
    } finally {
      second.dispose();
    }
  });
});

describe("portal against a live tangle node", () => {
  let node: LiveNode;

  beforeAll(async () => {
    node = await startNode("tangle");
  });

  afterAll(async () => {
    await node.stop();
  });

  it("renders sites with the genesis marker and balances intact", async () => {
    const tab = openTab(node.base);
    try {
      await act(tab, "generate-key");
      await act(tab, "signup");
      await act(tab, "refresh-ledger");
      expect(text(tab.root, "ledger-mode")).toBe("tangle");
      const genesis = tab.root.querySelector('[data-site="0"]');
      expect(genesis).toBeTruthy();
      expect(genesis!.textContent).toContain("genesis");
      expect(tab.root.querySelectorAll("[data-site]").length).toBeGreaterThanOrEqual(2);
      expect(tab.root.querySelectorAll("[data-tx]").length).toBeGreaterThan(0);
      await balanceShownMatchesServer(tab, node.base);
    } finally {
      tab.dispose();
    }
  });
});
