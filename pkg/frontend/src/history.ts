/** Immutable run history for what-if comparison. */

export interface HistoryEntry {
  readonly id: string;
  readonly submittedAt: number;
  readonly params: Readonly<Record<string, unknown>>;
  readonly instanceTexts: readonly string[];
  readonly resultPngBase64: string;
  readonly provenance: Readonly<Record<string, unknown>>;
}

export class RunHistory {
  private entries: HistoryEntry[] = [];

  add(entry: HistoryEntry): HistoryEntry {
    const frozen = Object.freeze({
      ...entry,
      params: Object.freeze({ ...entry.params }),
      instanceTexts: Object.freeze([...entry.instanceTexts]),
      provenance: Object.freeze({ ...entry.provenance }),
    });
    this.entries = [...this.entries, frozen];
    return frozen;
  }

  all(): readonly HistoryEntry[] {
    return this.entries;
  }

  latest(): HistoryEntry | undefined {
    return this.entries[this.entries.length - 1];
  }

  get(id: string): HistoryEntry | undefined {
    return this.entries.find((e) => e.id === id);
  }
}
