export interface Timers {
  set(fn: () => void, ms: number): number;
  clear(id: number): void;
}

export const realTimers: Timers = {
  set: (fn, ms) => window.setTimeout(fn, ms),
  clear: (id) => window.clearTimeout(id),
};

export interface Debounced<A extends unknown[]> {
  (...args: A): void;
  cancel(): void;
  flush(): void;
}

/** Trailing-edge debounce: at most one call per quiet window. */
export function debounce<A extends unknown[]>(
  fn: (...args: A) => void,
  delayMs: number,
  timers: Timers = realTimers,
): Debounced<A> {
  let handle: number | null = null;
  let pending: A | null = null;

  const wrapped = (...args: A) => {
    pending = args;
    if (handle !== null) timers.clear(handle);
    handle = timers.set(() => {
      handle = null;
      const args2 = pending!;
      pending = null;
      fn(...args2);
    }, delayMs);
  };
  wrapped.cancel = () => {
    if (handle !== null) timers.clear(handle);
    handle = null;
    pending = null;
  };
  wrapped.flush = () => {
    if (handle !== null && pending !== null) {
      timers.clear(handle);
      const args = pending;
      handle = null;
      pending = null;
      fn(...args);
    }
  };
  return wrapped;
}
