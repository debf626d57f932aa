import { AuthError, postChat } from "./api";
import { injectStyles, renderBubble, renderLog } from "./render";
import {
  appendMessage,
  clearConversation,
  loadConversation,
  loadToken,
  saveToken,
} from "./storage";
import type { StoredConversation } from "./types";

export interface App {
  /** appends the user message, calls the API, renders the reply */
  send(text: string): Promise<void>;
  /** re-sends the current history after a failed request */
  retry(): Promise<void>;
  clear(): void;
  conversation: StoredConversation;
}

function now(): string {
  return new Date().toISOString();
}

export function mount(doc: Document, root: HTMLElement, baseUrl = ""): App {
  injectStyles(doc);

  const log = doc.createElement("div");
  log.className = "chat-log";

  const form = doc.createElement("form");
  form.className = "composer";
  const input = doc.createElement("input");
  input.type = "text";
  input.placeholder = "Ask about your records";
  const sendButton = doc.createElement("button");
  sendButton.type = "submit";
  sendButton.textContent = "Send";
  const clearButton = doc.createElement("button");
  clearButton.type = "button";
  clearButton.className = "clear";
  clearButton.textContent = "Clear";
  form.append(input, sendButton, clearButton);

  const settings = doc.createElement("div");
  settings.className = "settings";
  const tokenLabel = doc.createElement("label");
  tokenLabel.textContent = "Access token: ";
  const tokenInput = doc.createElement("input");
  tokenInput.type = "password";
  tokenInput.className = "token";
  tokenInput.value = loadToken();
  tokenLabel.appendChild(tokenInput);
  settings.appendChild(tokenLabel);

  root.append(log, form, settings);

  const app: App = {
    conversation: loadConversation(),
    async send(text: string): Promise<void> {
      const trimmed = text.trim();
      if (!trimmed || input.disabled) return;
      appendMessage(app.conversation, {
        role: "user",
        text: trimmed,
        timestamp: now(),
      });
      renderLog(doc, log, app.conversation.messages);
      await requestReply();
    },
    async retry(): Promise<void> {
      if (input.disabled) return;
      renderLog(doc, log, app.conversation.messages);
      await requestReply();
    },
    clear(): void {
      app.conversation = clearConversation();
      renderLog(doc, log, app.conversation.messages);
    },
  };

  async function requestReply(): Promise<void> {
    setPending(true);
    try {
      const reply = await postChat(app.conversation.messages, loadToken(), baseUrl);
      appendMessage(app.conversation, {
        role: "assistant",
        text: reply.answer,
        sources: reply.sources,
        timestamp: now(),
      });
      renderLog(doc, log, app.conversation.messages);
    } catch (failure) {
      if (failure instanceof AuthError) {
        showError(`${failure.message} — set it in the settings pane below.`, false);
        tokenInput.focus();
      } else {
        showError(String((failure as Error).message ?? failure), true);
      }
    } finally {
      setPending(false);
    }
  }

  // error bubbles are transient: rendered, never persisted, so a reload
  // restores only the real conversation
  function showError(text: string, retryable: boolean): void {
    const bubble = renderBubble(doc, { role: "error", text, timestamp: now() });
    if (retryable) {
      const retryButton = doc.createElement("button");
      retryButton.type = "button";
      retryButton.className = "retry";
      retryButton.textContent = "Retry";
      retryButton.addEventListener("click", () => void app.retry());
      bubble.appendChild(retryButton);
    }
    log.appendChild(bubble);
  }

  function setPending(pending: boolean): void {
    input.disabled = pending;
    sendButton.disabled = pending;
    root.toggleAttribute("data-pending", pending);
  }

  form.addEventListener("submit", (event) => {
    event.preventDefault();
    const text = input.value;
    input.value = "";
    void app.send(text);
  });
  clearButton.addEventListener("click", () => app.clear());
  tokenInput.addEventListener("change", () => saveToken(tokenInput.value));

  renderLog(doc, log, app.conversation.messages);
  return app;
}
