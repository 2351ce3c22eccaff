import { ApiClient } from "./api.js";
import { Viewer } from "./viewer.js";

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("service") ?? "http://localhost:8100";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app element");

const viewer = new Viewer(new ApiClient(baseUrl), root);
void viewer.loadImages();
