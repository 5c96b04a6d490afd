import { StudioApi } from "./api.js";
import { StudioApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
const server = params.get("server") ?? "http://127.0.0.1:7878";

const app = new StudioApp(document, new StudioApi(server));
app.init().catch((err) => {
  const box = document.getElementById("toast");
  if (box) {
    box.textContent = `failed to reach server at ${server}: ${err.message}`;
    box.classList.add("visible");
  }
});
