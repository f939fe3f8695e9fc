/** Chat panel: message bubbles, send form, per-reply feedback controls. */

import type { ChatApi } from "./api.js";

type Api = Pick<ChatApi, "chat" | "feedback">;

export class ChatPanel {
  readonly root: HTMLElement;
  private readonly list: HTMLUListElement;
  private readonly input: HTMLInputElement;

  constructor(
    private readonly api: Api,
    doc: Document = document,
  ) {
    this.root = doc.createElement("section");
    this.root.className = "chat-panel";

    this.list = doc.createElement("ul");
    this.list.className = "messages";

    const form = doc.createElement("form");
    form.className = "composer";
    this.input = doc.createElement("input");
    this.input.type = "text";
    this.input.name = "message";
    this.input.placeholder = "Ask the support bot";
    this.input.autocomplete = "off";
    const send = doc.createElement("button");
    send.type = "submit";
    send.textContent = "Send";
    form.append(this.input, send);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      void this.send();
    });

    this.root.append(this.list, form);
  }

  /** Sends whatever is in the input; resolves when the reply bubble settled. */
  async send(): Promise<void> {
    const text = this.input.value.trim();
    if (!text) {
      return;
    }
    this.input.value = "";
    this.bubble("user", text);
    const pending = this.bubble("bot", "…");
    try {
      const reply = await this.api.chat(text);
      this.textOf(pending).textContent = reply.reply;
      pending.dataset.messageId = reply.message_id;
      pending.dataset.round = String(reply.round);
      this.attachFeedback(pending, reply.message_id);
    } catch (err) {
      pending.classList.add("error");
      this.textOf(pending).textContent =
        err instanceof Error ? err.message : String(err);
    }
  }

  private textOf(item: HTMLLIElement): HTMLElement {
    return item.querySelector<HTMLElement>(".text")!;
  }

  private bubble(kind: "user" | "bot", text: string): HTMLLIElement {
    const doc = this.root.ownerDocument;
    const item = doc.createElement("li");
    item.className = `bubble ${kind}`;
    const span = doc.createElement("span");
    span.className = "text";
    span.textContent = text;
    item.append(span);
    this.list.append(item);
    return item;
  }

  private attachFeedback(item: HTMLLIElement, messageId: string): void {
    const doc = this.root.ownerDocument;
    const controls = doc.createElement("div");
    controls.className = "feedback";
    const up = doc.createElement("button");
    up.type = "button";
    up.className = "up";
    up.textContent = "good";
    const down = doc.createElement("button");
    down.type = "button";
    down.className = "down";
    down.textContent = "bad";
    controls.append(up, down);
    item.append(controls);

    up.addEventListener("click", () => {
      void this.api
        .feedback(messageId, true)
        .then(() => controls.replaceChildren(this.note("thanks")))
        .catch((err) => controls.replaceChildren(this.note(String(err))));
    });

    down.addEventListener("click", () => {
      controls.replaceChildren(this.correctionForm(messageId, controls));
    });
  }

  private correctionForm(messageId: string, controls: HTMLElement): HTMLFormElement {
    const doc = this.root.ownerDocument;
    const form = doc.createElement("form");
    form.className = "correction";
    const input = doc.createElement("input");
    input.type = "text";
    input.name = "corrected";
    input.placeholder = "What should it have said?";
    const submit = doc.createElement("button");
    submit.type = "submit";
    submit.textContent = "Correct";
    form.append(input, submit);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const corrected = input.value.trim();
      if (!corrected) {
        return;
      }
      void this.api
        .feedback(messageId, false, corrected)
        .then((resp) => {
          const text =
            resp.n_k === null
              ? "recorded"
              : `recorded, silo now holds ${resp.n_k} pairs`;
          controls.replaceChildren(this.note(text));
        })
        .catch((err) => controls.replaceChildren(this.note(String(err))));
    });
    return form;
  }

  private note(text: string): HTMLSpanElement {
    const span = this.root.ownerDocument.createElement("span");
    span.className = "note";
    span.textContent = text;
    return span;
  }
}
