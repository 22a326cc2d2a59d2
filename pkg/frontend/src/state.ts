/** Review-session state machine, UI-free so the flow is unit-testable.
 *
 * Invariants: a response is sent at most once per case per session; a
 * network failure never discards the reader's selected label; a 409
 * conflict surfaces a notice and advances to the next case.
 */

import { ApiError, CaseDescriptor, ReaderApi } from "./api.js";

export type Phase =
  | { name: "loading" }
  | { name: "viewing"; current: CaseDescriptor }
  | { name: "submitting"; current: CaseDescriptor }
  | { name: "retry"; current: CaseDescriptor; message: string }
  | { name: "complete" }
  | { name: "fatal"; message: string };

export interface SessionEvents {
  onChange: (session: ReviewSession) => void;
}

export class ReviewSession {
  phase: Phase = { name: "loading" };
  selectedLabel: string | null = null;
  notice: string | null = null;
  submittedCases = new Set<string>();
  answered = 0;
  private caseShownAt = 0;

  constructor(
    private readonly api: ReaderApi,
    readonly reader: string,
    readonly mode: "blind" | "assisted",
    private readonly events: SessionEvents,
    private readonly now: () => number = () => Date.now(),
  ) {}

  private emit(): void {
    this.events.onChange(this);
  }

  async start(): Promise<void> {
    await this.advance();
  }

  async advance(): Promise<void> {
    this.phase = { name: "loading" };
    this.selectedLabel = null;
    this.emit();
    try {
      const next = await this.api.nextCase(this.reader, this.mode);
      if (next.kind === "complete") {
        this.phase = { name: "complete" };
      } else {
        this.phase = { name: "viewing", current: next.value };
        this.caseShownAt = this.now();
      }
    } catch (err) {
      this.phase = { name: "fatal", message: err instanceof Error ? err.message : String(err) };
    }
    this.emit();
  }

  select(label: string): void {
    if (this.phase.name !== "viewing" && this.phase.name !== "retry") return;
    this.selectedLabel = label;
    this.emit();
  }

  async submit(): Promise<void> {
    if (this.phase.name !== "viewing" && this.phase.name !== "retry") return;
    if (this.selectedLabel === null) {
      this.notice = "choose a diagnosis first";
      this.emit();
      return;
    }
    const current = this.phase.current;
    if (this.submittedCases.has(current.case_id)) {
      // exactly-once guard: never re-send a case this session answered
      this.notice = "already answered";
      await this.advance();
      return;
    }
    const label = this.selectedLabel;
    this.phase = { name: "submitting", current };
    this.emit();
    try {
      await this.api.submitResponse(
        current.case_id,
        this.reader,
        label,
        this.mode,
        this.now() - this.caseShownAt,
      );
      this.submittedCases.add(current.case_id);
      this.answered += 1;
      this.notice = null;
      await this.advance();
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // someone (or a previous session) already answered: note and move on
        this.submittedCases.add(current.case_id);
        this.notice = "already answered";
        await this.advance();
      } else if (err instanceof ApiError && err.status === 422) {
        this.phase = { name: "viewing", current };
        this.notice = err.message;
        this.emit();
      } else {
        // network trouble: keep the selection and offer a retry
        this.phase = {
          name: "retry",
          current,
          message: err instanceof Error ? err.message : "network failure",
        };
        this.selectedLabel = label;
        this.emit();
      }
    }
  }

  async retry(): Promise<void> {
    if (this.phase.name !== "retry") return;
    this.phase = { name: "viewing", current: this.phase.current };
    this.emit();
    await this.submit();
  }
}
