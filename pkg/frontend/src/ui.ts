/** DOM rendering for the reader flow and the summary dashboard.
 *
 * Blind-mode invariant: no model-derived element (probability bars, overlay
 * toggle, overlay image) is ever created in the DOM — suppression happens at
 * render, not behind CSS.
 */

import { ReaderApi, StudySummary } from "./api.js";
import { radarSvg, RadarSeries } from "./radar.js";
import { ReviewSession } from "./state.js";

const SERIES_COLORS = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

export function renderSession(root: HTMLElement, session: ReviewSession, labels: string[]): void {
  root.textContent = "";
  const header = el("div", { class: "bar", "data-role": "header" });
  header.append(
    el("span", {}, `reader: ${session.reader}`),
    el("span", { "data-role": "mode" }, `mode: ${session.mode}`),
    el("span", { "data-role": "answered" }, `answered: ${session.answered}`),
  );
  root.append(header);

  if (session.notice) {
    root.append(el("div", { class: "notice", "data-role": "notice" }, session.notice));
  }

  const phase = session.phase;
  if (phase.name === "loading") {
    root.append(el("div", { "data-role": "loading" }, "loading next case..."));
    return;
  }
  if (phase.name === "complete") {
    const done = el("div", { class: "complete", "data-role": "complete" });
    done.append(
      el("h2", {}, "Study complete"),
      el("p", {}, `You answered ${session.answered} case(s). Thank you.`),
    );
    root.append(done);
    return;
  }
  if (phase.name === "fatal") {
    root.append(el("div", { class: "error", "data-role": "fatal" }, phase.message));
    return;
  }

  const current = phase.current;
  const viewer = el("div", { class: "viewer", "data-role": "case", "data-case-id": current.case_id });
  viewer.append(el("span", { "data-role": "remaining" }, `${current.remaining} case(s) remaining`));

  const img = el("img", {
    src: current.image_url,
    alt: "ultrasound image",
    "data-role": "case-image",
  });
  viewer.append(img);

  if (session.mode === "assisted") {
    if (current.overlay_url) {
      // first impression stays unassisted: the toggle starts off
      const toggle = el("button", { "data-role": "overlay-toggle", "aria-pressed": "false" },
        "show heatmap overlay");
      toggle.addEventListener("click", () => {
        const on = toggle.getAttribute("aria-pressed") === "true";
        toggle.setAttribute("aria-pressed", on ? "false" : "true");
        toggle.textContent = on ? "show heatmap overlay" : "hide heatmap overlay";
        img.setAttribute("src", on ? current.image_url : current.overlay_url!);
      });
      viewer.append(toggle);
    }
    if (current.model_probabilities) {
      viewer.append(renderProbabilityBars(current.model_probabilities, labels));
    }
  }
  root.append(viewer);

  const buttons = el("div", { class: "labels", "data-role": "label-buttons" });
  labels.forEach((label, i) => {
    const b = el(
      "button",
      {
        "data-role": "label-button",
        "data-label": label,
        "aria-pressed": session.selectedLabel === label ? "true" : "false",
      },
      `${i + 1}. ${label}`,
    );
    b.addEventListener("click", () => {
      session.select(label);
    });
    buttons.append(b);
  });
  root.append(buttons);

  const actions = el("div", { class: "actions" });
  if (phase.name === "retry") {
    actions.append(el("span", { class: "error", "data-role": "retry-message" },
      `submission failed: ${phase.message}`));
    const retry = el("button", { "data-role": "retry-button" }, "retry submission");
    retry.addEventListener("click", () => void session.retry());
    actions.append(retry);
  } else {
    const submit = el("button", {
      "data-role": "submit-button",
      ...(phase.name === "submitting" ? { disabled: "true" } : {}),
    }, phase.name === "submitting" ? "submitting..." : "submit diagnosis");
    submit.addEventListener("click", () => void session.submit());
    actions.append(submit);
  }
  root.append(actions);
}

export function renderProbabilityBars(
  probabilities: Record<string, number>,
  labels: string[],
): HTMLElement {
  const wrap = el("div", { class: "probs", "data-role": "prob-bars" });
  wrap.append(el("h3", {}, "model prediction"));
  for (const label of labels) {
    const p = probabilities[label] ?? 0;
    const row = el("div", { class: "prob-row", "data-role": "prob-row", "data-label": label });
    const fill = el("div", { class: "prob-fill" });
    fill.style.width = `${(p * 100).toFixed(1)}%`;
    const track = el("div", { class: "prob-track" });
    track.append(fill);
    row.append(
      el("span", { class: "prob-label" }, label),
      track,
      el("span", { class: "prob-value", "data-role": "prob-value" }, `${(p * 100).toFixed(1)}%`),
    );
    wrap.append(row);
  }
  return wrap;
}

export function bindKeyboard(session: ReviewSession, labels: string[]): (e: KeyboardEvent) => void {
  const handler = (e: KeyboardEvent) => {
    const index = Number.parseInt(e.key, 10) - 1;
    if (index >= 0 && index < labels.length) {
      session.select(labels[index]!);
    } else if (e.key === "Enter") {
      void session.submit();
    }
  };
  document.addEventListener("keydown", handler);
  return handler;
}

export async function renderSummary(
  root: HTMLElement,
  api: ReaderApi,
  adminToken: string,
): Promise<void> {
  root.textContent = "";
  let summary: StudySummary;
  try {
    summary = await api.summary(adminToken);
  } catch (err) {
    root.append(
      el("div", { class: "error", "data-role": "access-denied" },
        `access denied: ${err instanceof Error ? err.message : String(err)}`),
    );
    return;
  }
  root.append(el("h2", {}, "Recognition rates: readers vs model"));
  if (summary.response_count === 0) {
    root.append(el("div", { "data-role": "summary-empty" },
      "no responses recorded yet - the radar will appear once readers submit"));
    return;
  }
  const series: RadarSeries[] = [
    {
      name: "model",
      values: summary.labels.map((l) => summary.model.recognition_rate[l] ?? 0),
      color: SERIES_COLORS[0]!,
    },
  ];
  Object.entries(summary.readers).forEach(([reader, stats], i) => {
    series.push({
      name: reader,
      values: summary.labels.map((l) => stats.recognition_rate[l] ?? 0),
      color: SERIES_COLORS[(i + 1) % SERIES_COLORS.length]!,
    });
  });
  const chart = el("div", { "data-role": "radar" });
  chart.innerHTML = radarSvg(summary.labels, series);
  root.append(chart);
  const legend = el("ul", { class: "legend", "data-role": "legend" });
  series.forEach((s) => {
    const item = el("li", {}, s.name);
    item.style.color = s.color;
    legend.append(item);
  });
  root.append(legend);
  root.append(
    el("p", { "data-role": "totals" },
      `${summary.response_count} responses over ${summary.case_count} cases`),
  );
}
