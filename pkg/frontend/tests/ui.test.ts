// @vitest-environment jsdom
import { describe, expect, it, vi } from "vitest";

import { ApiError, ReaderApi } from "../src/api.js";
import { ReviewSession } from "../src/state.js";
import { renderProbabilityBars, renderSession, renderSummary } from "../src/ui.js";

const LABELS = ["Anencephaly", "Encephalocele", "Holoprosencephaly", "Rachischisis", "Normal"];

function viewingSession(mode: "blind" | "assisted", extra: Record<string, unknown> = {}) {
  const session = new ReviewSession({} as ReaderApi, "alice", mode, { onChange: () => {} });
  session.phase = {
    name: "viewing",
    current: {
      case_id: "c1",
      mode,
      image_url: "/api/cases/c1/image",
      remaining: 3,
      ...extra,
    },
  } as never;
  return session;
}

describe("renderSession", () => {
  it("blind mode renders no model-derived elements", () => {
    const root = document.createElement("div");
    // even if the service leaked the fields, blind rendering must drop them
    const session = viewingSession("blind", {
      model_probabilities: { Normal: 0.9 },
      overlay_url: "/api/cases/c1/overlay",
    });
    renderSession(root, session, LABELS);
    expect(root.querySelector('[data-role="prob-bars"]')).toBeNull();
    expect(root.querySelector('[data-role="overlay-toggle"]')).toBeNull();
    expect(root.innerHTML).not.toContain("overlay");
    expect(root.querySelectorAll('[data-role="label-button"]')).toHaveLength(5);
  });

  it("assisted mode shows probability bars summing to ~100%", () => {
    const root = document.createElement("div");
    const probs = {
      Anencephaly: 0.62, Encephalocele: 0.2, Holoprosencephaly: 0.1,
      Rachischisis: 0.05, Normal: 0.03,
    };
    const session = viewingSession("assisted", { model_probabilities: probs });
    renderSession(root, session, LABELS);
    const values = [...root.querySelectorAll('[data-role="prob-value"]')].map((n) =>
      Number.parseFloat(n.textContent ?? "0"),
    );
    expect(values).toHaveLength(5);
    const total = values.reduce((a, b) => a + b, 0);
    expect(Math.abs(total - 100)).toBeLessThan(0.5);
  });

  it("assisted overlay toggle defaults to off and swaps the image source", () => {
    const root = document.createElement("div");
    const session = viewingSession("assisted", {
      model_probabilities: { Normal: 1 },
      overlay_url: "/api/cases/c1/overlay",
    });
    renderSession(root, session, LABELS);
    const img = root.querySelector('[data-role="case-image"]') as HTMLImageElement;
    const toggle = root.querySelector('[data-role="overlay-toggle"]') as HTMLButtonElement;
    expect(toggle.getAttribute("aria-pressed")).toBe("false");
    expect(img.getAttribute("src")).toBe("/api/cases/c1/image");
    toggle.click();
    expect(img.getAttribute("src")).toBe("/api/cases/c1/overlay");
    toggle.click();
    expect(img.getAttribute("src")).toBe("/api/cases/c1/image");
  });

  it("completion screen appears when the study is done", () => {
    const root = document.createElement("div");
    const session = new ReviewSession({} as ReaderApi, "alice", "blind", { onChange: () => {} });
    session.phase = { name: "complete" };
    renderSession(root, session, LABELS);
    expect(root.querySelector('[data-role="complete"]')).not.toBeNull();
  });

  it("retry state shows the failure and a retry button", () => {
    const root = document.createElement("div");
    const session = viewingSession("blind");
    session.phase = { name: "retry", current: (session.phase as never as { current: never }).current, message: "fetch failed" };
    renderSession(root, session, LABELS);
    expect(root.querySelector('[data-role="retry-button"]')).not.toBeNull();
    expect(root.querySelector('[data-role="retry-message"]')?.textContent).toContain("fetch failed");
  });

  it("selected label button is marked pressed", () => {
    const root = document.createElement("div");
    const session = viewingSession("blind");
    session.selectedLabel = "Normal";
    renderSession(root, session, LABELS);
    const pressed = root.querySelector('[data-role="label-button"][aria-pressed="true"]');
    expect(pressed?.getAttribute("data-label")).toBe("Normal");
  });
});

describe("renderProbabilityBars", () => {
  it("renders one row per label in task order", () => {
    const bars = renderProbabilityBars({ Normal: 0.5, Anencephaly: 0.5 }, LABELS);
    const rows = [...bars.querySelectorAll('[data-role="prob-row"]')];
    expect(rows.map((r) => r.getAttribute("data-label"))).toEqual(LABELS);
  });
});

describe("renderSummary", () => {
  const summaryFixture = {
    labels: LABELS,
    model: {
      recognition_rate: {
        Anencephaly: 0.8, Encephalocele: 0.8, Holoprosencephaly: 0.8,
        Rachischisis: 0.8, Normal: 1.0,
      },
      totals: { Anencephaly: 5, Encephalocele: 5, Holoprosencephaly: 5, Rachischisis: 5, Normal: 5 },
    },
    readers: {
      alice: {
        recognition_rate: {
          Anencephaly: 0.25, Encephalocele: 0.25, Holoprosencephaly: 0.25,
          Rachischisis: 0.25, Normal: 1.0,
        },
        totals: { Anencephaly: 4, Encephalocele: 4, Holoprosencephaly: 4, Rachischisis: 4, Normal: 4 },
        responses: 20,
      },
    },
    case_count: 25,
    response_count: 20,
  };

  function apiWith(summary: unknown, fail?: ApiError): Partial<ReaderApi> {
    return {
      summary: vi.fn(async () => {
        if (fail) throw fail;
        return summary as never;
      }),
    };
  }

  it("draws one polygon per participant; model encloses reader at 0.8 vs 0.25", async () => {
    const root = document.createElement("div");
    await renderSummary(root, apiWith(summaryFixture) as ReaderApi, "tok");
    const polygons = [...root.querySelectorAll("polygon[data-series]")];
    expect(polygons.map((p) => p.getAttribute("data-series"))).toEqual(["model", "alice"]);

    const center = 210; // RADAR_SIZE / 2
    const radius = (pts: string, i: number) => {
      const [x, y] = pts.split(" ")[i]!.split(",").map(Number) as [number, number];
      return Math.hypot(x - center, y - center);
    };
    const modelPts = polygons[0]!.getAttribute("points")!;
    const alicePts = polygons[1]!.getAttribute("points")!;
    for (let i = 0; i < 4; i += 1) {
      // anomaly axes: the model polygon strictly encloses the reader polygon
      expect(radius(modelPts, i)).toBeGreaterThan(radius(alicePts, i));
    }
    // both hit 1.0 on Normal: vertices touch
    expect(Math.abs(radius(modelPts, 4) - radius(alicePts, 4))).toBeLessThan(1e-9);
  });

  it("empty study shows a placeholder", async () => {
    const root = document.createElement("div");
    await renderSummary(
      root,
      apiWith({ ...summaryFixture, response_count: 0 }) as ReaderApi,
      "tok",
    );
    expect(root.querySelector('[data-role="summary-empty"]')).not.toBeNull();
    expect(root.querySelector("svg")).toBeNull();
  });

  it("bad token shows the access-denied view", async () => {
    const root = document.createElement("div");
    await renderSummary(
      root,
      apiWith(null, new ApiError(403, "summary requires the admin token")) as ReaderApi,
      "wrong",
    );
    expect(root.querySelector('[data-role="access-denied"]')).not.toBeNull();
  });
});
