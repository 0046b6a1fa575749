import { ApiClient } from "./api.js";
import { AnnotatorApp } from "./app.js";

const root = document.getElementById("app");
if (root === null) {
  throw new Error("missing #app mount point");
}
new AnnotatorApp(root, new ApiClient()).start();
