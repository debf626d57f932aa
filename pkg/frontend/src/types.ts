export interface SourceRef {
  record_id: number;
  specifier: string;
}

export interface UiMessage {
  role: "user" | "assistant" | "error";
  text: string;
  /** only assistant messages carry sources */
  sources?: SourceRef[];
  timestamp: string;
}

export interface StoredConversation {
  id: string;
  messages: UiMessage[];
}

export interface ChatReply {
  answer: string;
  sources: SourceRef[];
  format_exhausted?: boolean;
}
