/**
 * scheduler.ts
 *
 * Rate control for the two chatty paths: parameter updates are debounced so
 * a drag emits at most one PUT per interval, and tile fetches run through a
 * pool with a bounded number of requests in flight.
 */

/**
 * Trailing-edge debouncer: the latest job runs once the interval since the
 * first pending request elapses, so at most one job executes per interval
 * no matter how fast events arrive.
 */
export class Debouncer {
    private timer: ReturnType<typeof setTimeout> | null = null;
    private job: (() => void) | null = null;

    constructor(readonly intervalMs = 50) {}

    /** Coalesces with any pending job; the latest one wins. */
    schedule(job: () => void): void {
        this.job = job;
        if (this.timer !== null) return;
        this.timer = setTimeout(() => {
            this.timer = null;
            const pending = this.job;
            this.job = null;
            pending?.();
        }, this.intervalMs);
    }

    /** Runs the pending job now instead of waiting out the interval. */
    flush(): void {
        if (this.timer === null) return;
        clearTimeout(this.timer);
        this.timer = null;
        const pending = this.job;
        this.job = null;
        pending?.();
    }

    /** Drops the pending job without running it. */
    cancel(): void {
        if (this.timer !== null) clearTimeout(this.timer);
        this.timer = null;
        this.job = null;
    }

    pending(): boolean {
        return this.timer !== null;
    }
}

export interface FetchTask {
    /** Stable identity; a key already queued or in flight is not re-added. */
    key: string;
    run(): Promise<void>;
}

/**
 * Bounded-concurrency task pool.  `replace` swaps the queued (not yet
 * started) tasks for a new prioritized list, which is how a parameter
 * change cancels fetches the user no longer cares about.
 */
export class FetchPool {
    private queue: FetchTask[] = [];
    private inFlight = new Set<string>();
    private idleWaiters: Array<() => void> = [];

    constructor(readonly maxInFlight = 8) {}

    /** Number of tasks currently running. */
    get active(): number {
        return this.inFlight.size;
    }

    /** Number of tasks queued but not yet started. */
    get queued(): number {
        return this.queue.length;
    }

    /** Replaces the queue with `tasks` (in priority order) and pumps. */
    replace(tasks: FetchTask[]): void {
        this.queue = tasks.slice();
        this.pump();
    }

    /** Appends one task (used for follow-up polls of preview tiles). */
    add(task: FetchTask): void {
        this.queue.push(task);
        this.pump();
    }

    /** Resolves once the queue is empty and nothing is in flight. */
    idle(): Promise<void> {
        if (this.queue.length === 0 && this.inFlight.size === 0) return Promise.resolve();
        return new Promise((resolve) => this.idleWaiters.push(resolve));
    }

    private pump(): void {
        while (this.inFlight.size < this.maxInFlight && this.queue.length > 0) {
            const task = this.queue.shift()!;
            if (this.inFlight.has(task.key)) continue;
            this.inFlight.add(task.key);
            void task
                .run()
                .catch(() => undefined) // tasks report their own errors
                .then(() => {
                    this.inFlight.delete(task.key);
                    this.pump();
                });
        }
        if (this.queue.length === 0 && this.inFlight.size === 0) {
            const waiters = this.idleWaiters;
            this.idleWaiters = [];
            for (const resolve of waiters) resolve();
        }
    }
}
