// Keyboard-first flow: curators process hundreds of images, so every
// decision is reachable without the pointer.
//   1..k  select the candidate at that rank
//   N     mark as new individual
//   S     skip
//   Enter submit the current selection

export type Intent =
  | { type: 'select'; rank: number }
  | { type: 'new_individual' }
  | { type: 'skip' }
  | { type: 'submit' };

/** Map a KeyboardEvent.key to a review intent; null when the key is not
 * bound or the digit exceeds the number of candidates. */
export function keyToIntent(key: string, candidateCount: number): Intent | null {
  if (key >= '1' && key <= '9') {
    const rank = Number(key);
    return rank <= candidateCount ? { type: 'select', rank } : null;
  }
  switch (key) {
    case 'n':
    case 'N':
      return { type: 'new_individual' };
    case 's':
    case 'S':
      return { type: 'skip' };
    case 'Enter':
      return { type: 'submit' };
    default:
      return null;
  }
}
