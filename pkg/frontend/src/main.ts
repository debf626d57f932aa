import { mount } from "./app";

document.addEventListener("DOMContentLoaded", () => {
  const root = document.getElementById("app");
  if (root) mount(document, root);
});
