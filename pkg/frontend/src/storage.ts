import type { StoredConversation, UiMessage } from "./types";

export const CONVERSATION_KEY = "record-chat.conversation";
export const TOKEN_KEY = "record-chat.token";

export function loadConversation(): StoredConversation {
  try {
    const raw = localStorage.getItem(CONVERSATION_KEY);
    if (raw) {
      const parsed = JSON.parse(raw) as StoredConversation;
      if (Array.isArray(parsed.messages)) return parsed;
    }
  } catch {
    // fall through to a fresh conversation on corrupt storage
  }
  return { id: newConversationId(), messages: [] };
}

export function saveConversation(conversation: StoredConversation): void {
  localStorage.setItem(CONVERSATION_KEY, JSON.stringify(conversation));
}

export function appendMessage(
  conversation: StoredConversation,
  message: UiMessage,
): void {
  conversation.messages.push(message);
  saveConversation(conversation);
}

export function clearConversation(): StoredConversation {
  localStorage.removeItem(CONVERSATION_KEY);
  return { id: newConversationId(), messages: [] };
}

export function loadToken(): string {
  return localStorage.getItem(TOKEN_KEY) ?? "";
}

export function saveToken(token: string): void {
  localStorage.setItem(TOKEN_KEY, token);
}

function newConversationId(): string {
  return `conv-${Date.now().toString(36)}-${Math.floor(Math.random() * 1e6).toString(36)}`;
}
