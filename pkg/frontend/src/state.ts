export interface Snapshot {
  noise: number[];
  imageUrl: string;
}

export interface StudioState {
  layoutId: string | null;
  noise: number[];
  imageUrl: string | null;
  pinned: Snapshot | null;
  lastIssuedId: number;
  lastAppliedId: number;
}

export function initialState(classCount: number): StudioState {
  return {
    layoutId: null,
    noise: new Array(classCount).fill(0),
    imageUrl: null,
    pinned: null,
    lastIssuedId: 0,
    lastAppliedId: 0,
  };
}

export function clampNoise(v: number): number {
  return Math.min(1, Math.max(-1, v));
}

export function withSlider(state: StudioState, c: number, value: number): StudioState {
  const noise = state.noise.slice();
  noise[c] = clampNoise(value);
  return { ...state, noise };
}

export function withReset(state: StudioState): StudioState {
  return { ...state, noise: state.noise.map(() => 0) };
}

export function issueRequest(state: StudioState): [StudioState, number] {
  const id = state.lastIssuedId + 1;
  return [{ ...state, lastIssuedId: id }, id];
}

/** Newest-wins: a response is applied only if nothing newer was applied.
 * Returns the unchanged state for stale responses. */
export function applyResponse(
  state: StudioState,
  requestId: number,
  imageUrl: string,
): StudioState {
  if (requestId <= state.lastAppliedId) return state;
  return { ...state, imageUrl, lastAppliedId: requestId };
}

export function withPin(state: StudioState): StudioState {
  if (state.imageUrl === null) return state;
  return { ...state, pinned: { noise: state.noise.slice(), imageUrl: state.imageUrl } };
}
