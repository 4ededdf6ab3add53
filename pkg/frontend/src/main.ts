/** Browser entry point: resolve the API base URL and mount the app. */

import { createApp } from "./app.js";

declare global {
  interface Window {
    DATCHAIN_API?: string;
  }
}

function resolveApiBase(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("api");
  if (fromQuery) {
    localStorage.setItem("datchain-api", fromQuery);
    return fromQuery;
  }
  return (
    window.DATCHAIN_API ??
    localStorage.getItem("datchain-api") ??
    window.location.origin
  );
}

const apiBase = resolveApiBase().replace(/\/$/, "");

const bar = document.getElementById("apibar");
if (bar) {
  const input = document.createElement("input");
  input.value = apiBase;
  input.size = 40;
  const connect = document.createElement("button");
  connect.textContent = "connect";
  connect.addEventListener("click", () => {
    window.location.search = `?api=${encodeURIComponent(input.value.trim())}`;
  });
  bar.append("node ", input, connect);
}

const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");
createApp(root, { apiBase });
