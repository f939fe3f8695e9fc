/** Round-metrics dashboard: status line plus two SVG line charts. */

import type { ChatApi, FederationStatus, MetricsRow } from "./api.js";

type Api = Pick<ChatApi, "metrics" | "status">;

const SVG_NS = "http://www.w3.org/2000/svg";
const WIDTH = 360;
const HEIGHT = 140;
const PAD = 24;

/** One x,y pair per value, evenly spaced, y scaled into [lo, hi]. */
export function seriesPoints(values: number[], lo: number, hi: number): string[] {
  const span = hi - lo || 1;
  const step = values.length > 1 ? (WIDTH - 2 * PAD) / (values.length - 1) : 0;
  return values.map((v, i) => {
    const x = PAD + i * step;
    const y = HEIGHT - PAD - ((v - lo) / span) * (HEIGHT - 2 * PAD);
    return `${x.toFixed(1)},${y.toFixed(1)}`;
  });
}

export class Dashboard {
  readonly root: HTMLElement;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly api: Api,
    doc: Document = document,
  ) {
    this.root = doc.createElement("section");
    this.root.className = "dashboard";
    this.render([], undefined);
  }

  async refresh(): Promise<void> {
    const [rows, status] = await Promise.all([this.api.metrics(), this.api.status()]);
    this.render(rows, status);
  }

  start(intervalMs = 3000): void {
    this.stop();
    this.timer = setInterval(() => {
      void this.refresh().catch(() => {
        // keep the last good render when the service blips
      });
    }, intervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  render(rows: MetricsRow[], status?: FederationStatus): void {
    const doc = this.root.ownerDocument;
    this.root.replaceChildren();

    const heading = doc.createElement("h2");
    heading.textContent = "Federation";
    this.root.append(heading);

    if (status) {
      const line = doc.createElement("p");
      line.className = "status";
      const where = status.done
        ? `finished after round ${status.t}`
        : `round ${status.t}${status.rounds ? ` of ${status.rounds}` : ""}`;
      line.textContent = status.degraded ? `combiner unreachable, ${where}` : where;
      this.root.append(line);
    }

    if (rows.length === 0) {
      const empty = doc.createElement("p");
      empty.className = "empty";
      empty.textContent = "no rounds yet";
      this.root.append(empty);
      return;
    }

    const acc = rows.map((r) => r.global_acc ?? r.mean_val_acc);
    const loss = rows.map((r) => r.global_loss ?? r.mean_val_loss);
    this.root.append(
      this.chart(doc, "validation accuracy", acc, 0, 100),
      this.chart(doc, "validation loss", loss, Math.min(...loss), Math.max(...loss)),
    );
  }

  private chart(
    doc: Document,
    title: string,
    values: number[],
    lo: number,
    hi: number,
  ): HTMLElement {
    const fig = doc.createElement("figure");
    fig.className = "chart";
    const cap = doc.createElement("figcaption");
    cap.textContent = title;

    const svg = doc.createElementNS(SVG_NS, "svg");
    svg.setAttribute("viewBox", `0 0 ${WIDTH} ${HEIGHT}`);
    svg.setAttribute("role", "img");
    svg.setAttribute("aria-label", title);

    const axis = doc.createElementNS(SVG_NS, "path");
    axis.setAttribute("class", "axis");
    axis.setAttribute(
      "d",
      `M ${PAD} ${PAD} V ${HEIGHT - PAD} H ${WIDTH - PAD}`,
    );
    axis.setAttribute("fill", "none");
    axis.setAttribute("stroke", "#999");
    svg.append(axis);

    const pts = seriesPoints(values, lo, hi);
    const line = doc.createElementNS(SVG_NS, "polyline");
    line.setAttribute("class", "series");
    line.setAttribute("fill", "none");
    line.setAttribute("stroke", "currentColor");
    line.setAttribute("stroke-width", "2");
    line.setAttribute("points", pts.join(" "));
    svg.append(line);

    for (const pt of pts) {
      const [x, y] = pt.split(",");
      const dot = doc.createElementNS(SVG_NS, "circle");
      dot.setAttribute("cx", x!);
      dot.setAttribute("cy", y!);
      dot.setAttribute("r", "3");
      svg.append(dot);
    }

    fig.append(cap, svg);
    return fig;
  }
}
