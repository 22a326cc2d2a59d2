/** Entry point: `index.html?reader=alice&mode=assisted` runs the review
 * flow; `index.html#summary` prompts for the admin token and shows the
 * recognition-rate radar. */

import { ReaderApi } from "./api.js";
import { ReviewSession } from "./state.js";
import { bindKeyboard, renderSession, renderSummary } from "./ui.js";

async function boot(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app element");
  const api = new ReaderApi("");

  if (window.location.hash.startsWith("#summary")) {
    const token = window.prompt("admin token") ?? "";
    await renderSummary(root, api, token);
    return;
  }

  const params = new URLSearchParams(window.location.search);
  const reader = params.get("reader");
  const mode = params.get("mode") === "assisted" ? "assisted" : "blind";
  if (!reader) {
    root.textContent = "missing ?reader=<id> query parameter";
    return;
  }
  const meta = await api.meta();
  const session = new ReviewSession(api, reader, mode, {
    onChange: (s) => renderSession(root, s, meta.labels),
  });
  bindKeyboard(session, meta.labels);
  await session.start();
}

void boot();
