/**
 * Click-to-segment workbench: shows a slice, maps canvas clicks to image
 * pixels, posts them to the measurement service, and overlays the returned
 * mask contour, RECIST diameter segments, and mm labels. All displayed
 * numbers come verbatim from the service response; the client never
 * measures anything itself.
 */

import { ApiClient, ImageEntry, MeasureResponse, NoLesionError } from "./api.js";
import { decodeRle, maskBoundary } from "./rle.js";
import {
  IDENTITY,
  Pt,
  ViewTransform,
  displayToImage,
  fitTransform,
  imageToDisplay,
  pan,
  zoomAt,
} from "./transform.js";

export interface OverlayToggles {
  mask: boolean;
  diameters: boolean;
  loi: boolean;
  stage1: boolean;
}

export interface ViewerState {
  imageId: string | null;
  window: { lo: number; hi: number };
  transform: ViewTransform;
  lastClick: Pt | null; // image pixel coordinates actually sent
  lastResponse: MeasureResponse | null;
  toggles: OverlayToggles;
}

const DEFAULT_WINDOW = { lo: -1024, hi: 1050 };

export class Viewer {
  readonly state: ViewerState = {
    imageId: null,
    window: { ...DEFAULT_WINDOW },
    transform: IDENTITY,
    lastClick: null,
    lastResponse: null,
    toggles: { mask: true, diameters: true, loi: false, stage1: false },
  };

  private images: ImageEntry[] = [];
  private requestToken = 0; // later clicks supersede in-flight ones

  readonly img: HTMLImageElement;
  readonly canvas: HTMLCanvasElement;
  readonly select: HTMLSelectElement;
  readonly labelLong: HTMLElement;
  readonly labelShort: HTMLElement;
  readonly toast: HTMLElement;
  readonly banner: HTMLElement;

  constructor(
    readonly api: ApiClient,
    readonly root: HTMLElement,
    readonly viewW = 768,
    readonly viewH = 768,
  ) {
    root.innerHTML = `
      <div class="banner" hidden></div>
      <div class="controls">
        <select class="image-select"></select>
        <label>lo <input type="number" class="win-lo" value="${DEFAULT_WINDOW.lo}"></label>
        <label>hi <input type="number" class="win-hi" value="${DEFAULT_WINDOW.hi}"></label>
      </div>
      <div class="stage" style="position:relative">
        <img class="slice" alt="CT slice">
        <canvas class="overlay" width="${viewW}" height="${viewH}"
                style="position:absolute;left:0;top:0"></canvas>
      </div>
      <div class="readout">
        <span class="label-long"></span>
        <span class="label-short"></span>
      </div>
      <div class="toast" hidden></div>`;
    this.banner = root.querySelector(".banner")!;
    this.select = root.querySelector(".image-select")!;
    this.img = root.querySelector(".slice")!;
    this.canvas = root.querySelector(".overlay")!;
    this.labelLong = root.querySelector(".label-long")!;
    this.labelShort = root.querySelector(".label-short")!;
    this.toast = root.querySelector(".toast")!;

    this.canvas.addEventListener("click", (ev) => {
      const rect = this.canvas.getBoundingClientRect();
      void this.clickAtDisplay({ x: ev.clientX - rect.left, y: ev.clientY - rect.top });
    });
    this.canvas.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      const rect = this.canvas.getBoundingClientRect();
      this.zoom({ x: ev.clientX - rect.left, y: ev.clientY - rect.top },
                ev.deltaY < 0 ? 1.25 : 0.8);
    });
    this.select.addEventListener("change", () => {
      void this.selectImage(this.select.value);
    });
    const lo = root.querySelector<HTMLInputElement>(".win-lo")!;
    const hi = root.querySelector<HTMLInputElement>(".win-hi")!;
    for (const el of [lo, hi]) {
      el.addEventListener("change", () =>
        this.setWindow(Number(lo.value), Number(hi.value)));
    }
  }

  async loadImages(): Promise<void> {
    try {
      this.images = await this.api.listImages();
      this.banner.hidden = true;
    } catch (err) {
      this.banner.textContent = `service unreachable: ${String(err)} — retry?`;
      this.banner.hidden = false;
      throw err;
    }
    this.select.innerHTML = this.images
      .map((e) => `<option value="${e.id}">${e.id}</option>`)
      .join("");
    if (this.images.length > 0) await this.selectImage(this.images[0].id);
  }

  currentImage(): ImageEntry | undefined {
    return this.images.find((e) => e.id === this.state.imageId);
  }

  async selectImage(id: string): Promise<void> {
    const entry = this.images.find((e) => e.id === id);
    if (!entry) throw new Error(`unknown image ${id}`);
    this.state.imageId = id;
    // measurements belong to the previous slice: drop them
    this.state.lastResponse = null;
    this.state.lastClick = null;
    this.state.transform = fitTransform(entry.width, entry.height, this.viewW, this.viewH);
    this.refreshPreview();
    this.render();
  }

  setWindow(lo: number, hi: number): void {
    if (!(lo < hi)) return;
    this.state.window = { lo, hi };
    this.refreshPreview();
  }

  zoom(anchor: Pt, factor: number): void {
    this.state.transform = zoomAt(this.state.transform, anchor, factor);
    this.render();
  }

  panBy(dx: number, dy: number): void {
    this.state.transform = pan(this.state.transform, dx, dy);
    this.render();
  }

  /** Map a display click to image pixels and request a measurement. */
  async clickAtDisplay(display: Pt): Promise<void> {
    const entry = this.currentImage();
    if (!entry) return;
    const p = displayToImage(this.state.transform, display);
    if (p.x < 0 || p.y < 0 || p.x >= entry.width || p.y >= entry.height) return;
    const token = ++this.requestToken;
    try {
      const resp = await this.api.measure(entry.id, [p.x, p.y]);
      if (token !== this.requestToken) return; // superseded by a later click
      this.state.lastClick = p;
      this.state.lastResponse = resp;
      this.render();
    } catch (err) {
      if (token !== this.requestToken) return;
      if (err instanceof NoLesionError) {
        this.showToast("no lesion here");
        return; // previous overlay stays untouched
      }
      this.showToast(`request failed: ${String(err)} — click to retry`);
    }
  }

  showToast(msg: string): void {
    this.toast.textContent = msg;
    this.toast.hidden = false;
    setTimeout(() => {
      this.toast.hidden = true;
    }, 3000);
  }

  private refreshPreview(): void {
    if (!this.state.imageId) return;
    const { lo, hi } = this.state.window;
    this.img.src = this.api.imageUrl(this.state.imageId, lo, hi);
  }

  render(): void {
    const resp = this.state.lastResponse;
    if (!resp) {
      this.labelLong.textContent = "";
      this.labelShort.textContent = "";
      delete this.labelLong.dataset.mm;
      delete this.labelShort.dataset.mm;
    } else {
      // labels echo the response fields; dataset keeps the raw values
      this.labelLong.dataset.mm = String(resp.long_mm);
      this.labelShort.dataset.mm = String(resp.short_mm);
      this.labelLong.textContent = `long: ${resp.long_mm.toFixed(1)} mm`;
      this.labelShort.textContent = `short: ${resp.short_mm.toFixed(1)} mm`;
    }
    this.paint();
  }

  /** Canvas painting, skipped where no 2D context exists (e.g. jsdom). */
  private paint(): void {
    let ctx: CanvasRenderingContext2D | null = null;
    try {
      ctx = this.canvas.getContext("2d");
    } catch {
      return;
    }
    if (!ctx) return;
    const t = this.state.transform;
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    const resp = this.state.lastResponse;
    if (!resp) return;
    const tog = this.state.toggles;

    if (tog.mask) {
      this.paintContour(ctx, resp.mask_rle, resp.height, resp.width, "#2ecc71");
    }
    if (tog.stage1 && resp.stage1_mask_rle) {
      this.paintContour(ctx, resp.stage1_mask_rle, resp.height, resp.width, "#f39c12");
    }
    if (tog.loi) {
      const o = imageToDisplay(t, { x: resp.loi.origin[0], y: resp.loi.origin[1] });
      ctx.strokeStyle = "#3498db";
      ctx.strokeRect(o.x, o.y, resp.loi.side * t.scale, resp.loi.side * t.scale);
    }
    if (tog.diameters) {
      for (const [pair, color] of [
        [resp.recist.long, "#e74c3c"],
        [resp.recist.short, "#e67e22"],
      ] as const) {
        const a = imageToDisplay(t, { x: pair[0][0], y: pair[0][1] });
        const b = imageToDisplay(t, { x: pair[1][0], y: pair[1][1] });
        ctx.strokeStyle = color;
        ctx.beginPath();
        ctx.moveTo(a.x, a.y);
        ctx.lineTo(b.x, b.y);
        ctx.stroke();
        for (const p of [a, b]) {
          ctx.beginPath();
          ctx.arc(p.x, p.y, 3, 0, 2 * Math.PI);
          ctx.stroke();
        }
      }
    }
    if (this.state.lastClick) {
      const c = imageToDisplay(t, this.state.lastClick);
      ctx.fillStyle = "#ffffff";
      ctx.beginPath();
      ctx.arc(c.x, c.y, 2.5, 0, 2 * Math.PI);
      ctx.fill();
    }
  }

  private paintContour(
    ctx: CanvasRenderingContext2D,
    rle: number[],
    height: number,
    width: number,
    color: string,
  ): void {
    const t = this.state.transform;
    const mask = decodeRle(rle, height, width);
    ctx.fillStyle = color;
    const s = Math.max(t.scale, 1);
    for (const p of maskBoundary(mask, height, width)) {
      const d = imageToDisplay(t, p);
      ctx.fillRect(d.x, d.y, s, s);
    }
  }
}
