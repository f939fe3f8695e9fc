import { ChatApi } from "./api.js";
import { ChatPanel } from "./chat.js";
import { Dashboard } from "./dashboard.js";

export interface App {
  api: ChatApi;
  panel: ChatPanel;
  dashboard: Dashboard;
}

export function mount(root: HTMLElement, baseUrl: string, pollMs = 3000): App {
  const api = new ChatApi(baseUrl);
  const panel = new ChatPanel(api);
  const dashboard = new Dashboard(api);
  root.append(panel.root, dashboard.root);
  void dashboard.refresh().catch(() => {});
  dashboard.start(pollMs);
  return { api, panel, dashboard };
}

declare global {
  interface Window {
    fedbotBase?: string;
  }
}

if (typeof document !== "undefined") {
  const root = document.getElementById("app");
  if (root) {
    mount(root, window.fedbotBase ?? "http://127.0.0.1:8080");
  }
}
