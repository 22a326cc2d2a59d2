/** SVG radar chart of per-class recognition rates, one polygon per
 * participant. Pure string generation so tests can inspect the geometry. */

export interface RadarSeries {
  name: string;
  values: number[]; // one value in [0,1] per axis
  color: string;
}

export const RADAR_SIZE = 420;
const CENTER = RADAR_SIZE / 2;
const RADIUS = RADAR_SIZE * 0.36;

export function vertex(axisIndex: number, axisCount: number, value: number): [number, number] {
  const angle = -Math.PI / 2 + (2 * Math.PI * axisIndex) / axisCount;
  const r = Math.max(0, Math.min(1, value)) * RADIUS;
  return [CENTER + r * Math.cos(angle), CENTER + r * Math.sin(angle)];
}

function pointsAttr(values: number[], axisCount: number): string {
  return values
    .map((v, i) => {
      const [x, y] = vertex(i, axisCount, v);
      return `${x.toFixed(2)},${y.toFixed(2)}`;
    })
    .join(" ");
}

export function radarSvg(axes: string[], series: RadarSeries[]): string {
  const n = axes.length;
  const parts: string[] = [
    `<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 ${RADAR_SIZE} ${RADAR_SIZE}" ` +
      `width="${RADAR_SIZE}" height="${RADAR_SIZE}" role="img" aria-label="recognition rates">`,
  ];
  for (const ring of [0.25, 0.5, 0.75, 1.0]) {
    parts.push(
      `<polygon fill="none" stroke="#ddd" points="${pointsAttr(Array(n).fill(ring), n)}"/>`,
    );
  }
  axes.forEach((axis, i) => {
    const [x, y] = vertex(i, n, 1);
    const [lx, ly] = vertex(i, n, 1.18);
    parts.push(`<line x1="${CENTER}" y1="${CENTER}" x2="${x.toFixed(2)}" y2="${y.toFixed(2)}" stroke="#ccc"/>`);
    parts.push(
      `<text x="${lx.toFixed(2)}" y="${ly.toFixed(2)}" text-anchor="middle" ` +
        `dominant-baseline="middle" font-size="12">${axis}</text>`,
    );
  });
  for (const s of series) {
    parts.push(
      `<polygon data-series="${s.name}" points="${pointsAttr(s.values, n)}" ` +
        `fill="${s.color}" fill-opacity="0.15" stroke="${s.color}" stroke-width="2"/>`,
    );
  }
  parts.push("</svg>");
  return parts.join("\n");
}
