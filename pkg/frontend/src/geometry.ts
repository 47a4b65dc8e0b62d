export interface Box {
  xmin: number
  ymin: number
  xmax: number
  ymax: number
}

export interface Disparity {
  dx: number
  dy: number
}

/**
 * Object disparity between a left-view and a right-view box.
 *
 * Boxes truncated at an image edge lose their true extent on that side,
 * so the formula falls back to the edge that is still observed: left/top
 * truncation compares the max edges, right/bottom truncation the min
 * edges, and untruncated boxes compare centers.
 */
export function objectDisparity(l: Box, r: Box, viewWidth: number, viewHeight: number): Disparity {
  let dx: number
  if (l.xmin === 0 || r.xmin === 0) {
    dx = l.xmax - r.xmax
  } else if (l.xmax === viewWidth || r.xmax === viewWidth) {
    dx = l.xmin - r.xmin
  } else {
    dx = (l.xmin + l.xmax) / 2 - (r.xmin + r.xmax) / 2
  }
  let dy: number
  if (l.ymin === 0 || r.ymin === 0) {
    dy = l.ymax - r.ymax
  } else if (l.ymax === viewHeight || r.ymax === viewHeight) {
    dy = l.ymin - r.ymin
  } else {
    dy = (l.ymin + l.ymax) / 2 - (r.ymin + r.ymax) / 2
  }
  return { dx, dy }
}

export function clamp(v: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, v))
}
