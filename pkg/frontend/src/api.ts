/** Typed client for the chat-service HTTP routes. */

export interface ChatReply {
  message_id: string;
  reply: string;
  round: number;
}

export interface FeedbackReply {
  message_id: string;
  recorded: boolean;
  n_k: number | null;
}

export interface MetricsRow {
  t: number;
  n_received: number;
  mean_train_acc: number;
  mean_val_acc: number;
  mean_train_loss: number;
  mean_val_loss: number;
  global_acc: number | null;
  global_loss: number | null;
}

export interface FederationStatus {
  t: number;
  rounds: number | null;
  done: boolean;
  degraded?: boolean;
  clients_live?: string[];
  n_k?: Record<string, number>;
  messages?: number;
  last_round?: Partial<MetricsRow> | null;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ChatApi {
  private readonly fetchFn: FetchLike;

  constructor(
    readonly baseUrl: string,
    fetchFn?: FetchLike,
  ) {
    // bind lazily so tests can stub globalThis.fetch after construction
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path, init);
    let body: unknown = null;
    try {
      body = await resp.json();
    } catch {
      body = null;
    }
    if (!resp.ok) {
      const detail =
        body !== null && typeof body === "object" && "error" in body
          ? String((body as { error: unknown }).error)
          : `${resp.status}`;
      throw new ApiError(resp.status, detail);
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  chat(message: string): Promise<ChatReply> {
    return this.post<ChatReply>("/chat", { message });
  }

  feedback(
    messageId: string,
    correct: boolean,
    correctedResponse?: string,
  ): Promise<FeedbackReply> {
    const payload: Record<string, unknown> = { message_id: messageId, correct };
    if (correctedResponse !== undefined) {
      payload.corrected_response = correctedResponse;
    }
    return this.post<FeedbackReply>("/feedback", payload);
  }

  async metrics(): Promise<MetricsRow[]> {
    const body = await this.request<{ rows: MetricsRow[] }>("/metrics");
    return body.rows;
  }

  status(): Promise<FederationStatus> {
    return this.request<FederationStatus>("/federation/status");
  }

  async healthy(): Promise<boolean> {
    try {
      await this.request<{ ok: boolean }>("/healthz");
      return true;
    } catch {
      return false;
    }
  }
}
