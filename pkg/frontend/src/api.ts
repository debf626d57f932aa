import type { ChatReply, UiMessage } from "./types";

export class AuthError extends Error {}
export class RequestError extends Error {}

/**
 * Sends the whole conversation (error bubbles excluded) to the chat
 * endpoint. The payload is exactly the stored history: the server keeps
 * no conversation state of its own.
 */
export async function postChat(
  history: UiMessage[],
  token: string,
  baseUrl = "",
): Promise<ChatReply> {
  const messages = history
    .filter((m) => m.role === "user" || m.role === "assistant")
    .map((m) => ({ role: m.role, content: m.text }));
  let response: Response;
  try {
    response = await fetch(`${baseUrl}/api/chat`, {
      method: "POST",
      headers: {
        "Content-Type": "application/json",
        Authorization: `Bearer ${token}`,
      },
      body: JSON.stringify({ messages }),
    });
  } catch (cause) {
    throw new RequestError(`network failure: ${String(cause)}`);
  }
  if (response.status === 401) {
    throw new AuthError("the server rejected the access token");
  }
  if (!response.ok) {
    throw new RequestError(`chat request failed with status ${response.status}`);
  }
  return (await response.json()) as ChatReply;
}

/** Route of the record view a cited source points at. */
export function recordRoute(recordId: number, baseUrl = ""): string {
  return `${baseUrl}/records/${recordId}`;
}
