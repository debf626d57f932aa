import { recordRoute } from "./api";
import type { SourceRef, UiMessage } from "./types";

/**
 * Injected once at startup. User bubbles sit right and green, assistant
 * bubbles left and gray; error bubbles reuse the assistant side in red.
 */
export const STYLES = `
.chat-log { display: flex; flex-direction: column; gap: 8px; padding: 12px; }
.bubble { max-width: 70%; padding: 10px 14px; border-radius: 12px; white-space: pre-wrap; }
.bubble.user { align-self: flex-end; background: #c8f7c5; text-align: right; }
.bubble.assistant { align-self: flex-start; background: #e3e3e3; }
.bubble.error { align-self: flex-start; background: #f7d4d4; }
.sources { margin: 6px 0 0; padding-left: 20px; font-size: 0.85em; }
.composer { display: flex; gap: 8px; padding: 12px; }
.composer input[type="text"] { flex: 1; }
.settings { padding: 0 12px 12px; font-size: 0.9em; }
`;

export function injectStyles(doc: Document): void {
  const style = doc.createElement("style");
  style.textContent = STYLES;
  doc.head.appendChild(style);
}

export function renderBubble(doc: Document, message: UiMessage): HTMLElement {
  const bubble = doc.createElement("div");
  bubble.className = `bubble ${message.role}`;
  const body = doc.createElement("p");
  body.textContent = message.text;
  bubble.appendChild(body);
  if (message.role === "assistant" && message.sources && message.sources.length) {
    bubble.appendChild(renderSources(doc, message.sources));
  }
  return bubble;
}

function renderSources(doc: Document, sources: SourceRef[]): HTMLElement {
  const list = doc.createElement("ol");
  list.className = "sources";
  for (const source of sources) {
    const item = doc.createElement("li");
    const link = doc.createElement("a");
    link.href = recordRoute(source.record_id);
    link.textContent = `Record ${source.record_id} (${source.specifier})`;
    item.appendChild(link);
    list.appendChild(item);
  }
  return list;
}

export function renderLog(doc: Document, log: HTMLElement, messages: UiMessage[]): void {
  log.replaceChildren(...messages.map((m) => renderBubble(doc, m)));
}
