import { beforeEach, describe, expect, it, vi } from "vitest";

import { ApiClient, MeasureResponse } from "../src/api";
import { encodeRle } from "../src/rle";
import { Viewer } from "../src/viewer";

const IMAGES = [
  { id: "les_000", width: 256, height: 256, spacing_mm: 0.8, split: "train" },
  { id: "les_001", width: 256, height: 256, spacing_mm: 1.1, split: "train" },
];

function fakeResponse(): MeasureResponse {
  const mask = new Uint8Array(256 * 256);
  for (let y = 100; y < 120; y++) mask.fill(1, y * 256 + 100, y * 256 + 130);
  return {
    mask_rle: encodeRle(mask),
    width: 256,
    height: 256,
    recist: {
      long: [[100, 110], [129, 110]],
      short: [[114, 100], [114, 119]],
      spacing_mm: 0.8,
    },
    long_mm: 23.2,
    short_mm: 15.2,
    loi: { origin: [80, 80], side: 72.5, input_size: 256 },
    stage1_mask_rle: null,
    model_version: "test",
  };
}

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

function setupFetch(measure: (body: any) => Response) {
  const mock = vi.fn(async (url: RequestInfo | URL, init?: RequestInit) => {
    const u = String(url);
    if (u.endsWith("/api/images")) return jsonResponse(IMAGES);
    if (u.endsWith("/api/measure")) return measure(JSON.parse(String(init?.body)));
    throw new Error(`unexpected fetch ${u}`);
  });
  vi.stubGlobal("fetch", mock);
  return mock;
}

async function makeViewer(): Promise<Viewer> {
  const root = document.createElement("div");
  document.body.appendChild(root);
  const viewer = new Viewer(new ApiClient("http://svc"), root, 512, 512);
  await viewer.loadImages();
  return viewer;
}

beforeEach(() => {
  vi.unstubAllGlobals();
  document.body.innerHTML = "";
});

describe("click_to_measure", () => {
  it("maps the display click to image pixels and renders the labels", async () => {
    const resp = fakeResponse();
    const mock = setupFetch(() => jsonResponse(resp));
    const viewer = await makeViewer();
    // 256 px image fit into 512 px view: scale 2, no letterbox offset
    await viewer.clickAtDisplay({ x: 230, y: 220 });

    const sent = JSON.parse(String(mock.mock.calls.at(-1)![1]?.body));
    expect(sent.image_id).toBe("les_000");
    expect(sent.click[0]).toBeCloseTo(115, 6);
    expect(sent.click[1]).toBeCloseTo(110, 6);
    // click marker state matches the request actually sent
    expect(viewer.state.lastClick).toEqual({ x: sent.click[0], y: sent.click[1] });

    expect(viewer.labelLong.dataset.mm).toBe(String(resp.long_mm));
    expect(viewer.labelShort.dataset.mm).toBe(String(resp.short_mm));
    expect(viewer.labelLong.textContent).toBe("long: 23.2 mm");
    expect(viewer.labelShort.textContent).toBe("short: 15.2 mm");
  });

  it("shows a toast and keeps the overlay on a background click", async () => {
    const resp = fakeResponse();
    let fail = false;
    setupFetch(() =>
      fail ? jsonResponse({ detail: "no lesion at click" }, 422) : jsonResponse(resp));
    const viewer = await makeViewer();
    await viewer.clickAtDisplay({ x: 230, y: 220 });
    const before = viewer.state.lastResponse;
    expect(before).not.toBeNull();

    fail = true;
    await viewer.clickAtDisplay({ x: 20, y: 20 });
    expect(viewer.toast.hidden).toBe(false);
    expect(viewer.toast.textContent).toBe("no lesion here");
    expect(viewer.state.lastResponse).toBe(before); // overlay untouched
  });

  it("re-click replaces the previous overlay atomically", async () => {
    const a = fakeResponse();
    const b = { ...fakeResponse(), long_mm: 9.9 };
    let current = a;
    setupFetch(() => jsonResponse(current));
    const viewer = await makeViewer();
    await viewer.clickAtDisplay({ x: 230, y: 220 });
    current = b;
    await viewer.clickAtDisplay({ x: 231, y: 221 });
    expect(viewer.state.lastResponse?.long_mm).toBe(9.9);
    expect(viewer.labelLong.dataset.mm).toBe("9.9");
  });

  it("ignores clicks that map outside the image", async () => {
    const mock = setupFetch(() => jsonResponse(fakeResponse()));
    const viewer = await makeViewer();
    const calls = mock.mock.calls.length;
    await viewer.clickAtDisplay({ x: -10, y: 5 });
    expect(mock.mock.calls.length).toBe(calls);
  });
});

describe("browse_and_window", () => {
  it("switching images clears stale overlays", async () => {
    setupFetch(() => jsonResponse(fakeResponse()));
    const viewer = await makeViewer();
    await viewer.clickAtDisplay({ x: 230, y: 220 });
    expect(viewer.state.lastResponse).not.toBeNull();

    await viewer.selectImage("les_001");
    expect(viewer.state.lastResponse).toBeNull();
    expect(viewer.state.lastClick).toBeNull();
    expect(viewer.labelLong.textContent).toBe("");
  });

  it("window change re-fetches the preview with the same parameters", async () => {
    setupFetch(() => jsonResponse(fakeResponse()));
    const viewer = await makeViewer();
    viewer.setWindow(-1024, 1050); // the server default window
    expect(viewer.img.src).toContain("/api/images/les_000?lo=-1024&hi=1050");
    viewer.setWindow(40, 400);
    expect(viewer.img.src).toContain("lo=40&hi=400");
    viewer.setWindow(500, 100); // invalid: lo >= hi is ignored
    expect(viewer.img.src).toContain("lo=40&hi=400");
  });

  it("raises the banner when the service is down", async () => {
    vi.stubGlobal("fetch", vi.fn(async () => {
      throw new Error("ECONNREFUSED");
    }));
    const root = document.createElement("div");
    document.body.appendChild(root);
    const viewer = new Viewer(new ApiClient("http://svc"), root);
    await expect(viewer.loadImages()).rejects.toThrow();
    expect(viewer.banner.hidden).toBe(false);
    expect(viewer.banner.textContent).toContain("retry");
  });
});
