/** Typed client for the measurement service HTTP API. */

export interface ImageEntry {
  id: string;
  width: number;
  height: number;
  spacing_mm: number;
  split?: string;
}

export interface RecistJson {
  long: [[number, number], [number, number]];
  short: [[number, number], [number, number]];
  spacing_mm: number;
}

export interface LoiJson {
  origin: [number, number];
  side: number;
  input_size: number;
}

export interface MeasureResponse {
  mask_rle: number[];
  width: number;
  height: number;
  recist: RecistJson;
  long_mm: number;
  short_mm: number;
  loi: LoiJson;
  stage1_mask_rle: number[] | null;
  model_version: string;
}

export class NoLesionError extends Error {
  constructor() {
    super("no lesion at click");
  }
}

export class ApiClient {
  constructor(readonly baseUrl: string) {}

  async listImages(): Promise<ImageEntry[]> {
    const r = await fetch(`${this.baseUrl}/api/images`);
    if (!r.ok) throw new Error(`listImages: HTTP ${r.status}`);
    return r.json();
  }

  /** Windowed 8-bit preview PNG for <img src>. */
  imageUrl(id: string, lo?: number, hi?: number): string {
    const q = lo !== undefined && hi !== undefined ? `?lo=${lo}&hi=${hi}` : "";
    return `${this.baseUrl}/api/images/${encodeURIComponent(id)}${q}`;
  }

  async measure(imageId: string, click: [number, number]): Promise<MeasureResponse> {
    const r = await fetch(`${this.baseUrl}/api/measure`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ image_id: imageId, click }),
    });
    if (r.status === 422) throw new NoLesionError();
    if (!r.ok) throw new Error(`measure: HTTP ${r.status}`);
    return r.json();
  }
}
