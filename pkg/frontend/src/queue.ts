// Serializes requests so at most one is in flight per session; later calls
// are queued (never dropped) and run in submission order.

export class RequestQueue {
  private chain: Promise<unknown> = Promise.resolve();
  private depth = 0;

  get pending(): number {
    return this.depth;
  }

  enqueue<T>(task: () => Promise<T>): Promise<T> {
    this.depth += 1;
    const run = this.chain.then(task);
    // keep the chain alive whether the task succeeds or fails
    this.chain = run.catch(() => undefined).finally(() => {
      this.depth -= 1;
    });
    return run;
  }
}
