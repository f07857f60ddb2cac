import { mount } from "./app.js";

const params = new URLSearchParams(window.location.search);
const api = params.get("api") ?? "http://127.0.0.1:8008";
mount(document, api);
