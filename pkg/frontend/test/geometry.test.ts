import { describe, expect, it } from "vitest"

import { Box, objectDisparity } from "../src/geometry.js"

const W = 160
const H = 80

function box(xmin: number, ymin: number, xmax: number, ymax: number): Box {
  return { xmin, ymin, xmax, ymax }
}

describe("objectDisparity", () => {
  it("compares centers for untruncated boxes", () => {
    const d = objectDisparity(box(40, 20, 90, 55), box(28, 21, 78, 56), W, H)
    expect(d.dx).toBe(12)
    expect(d.dy).toBe(-1)
  })

  it("falls back to max edges at the left edge", () => {
    const d = objectDisparity(box(10, 12, 58, 48), box(0, 12, 43, 48), W, H)
    expect(d.dx).toBe(58 - 43)
  })

  it("falls back to min edges at the right edge", () => {
    const d = objectDisparity(box(120, 10, 160, 40), box(98, 10, 138, 40), W, H)
    expect(d.dx).toBe(120 - 98)
  })

  it("left-edge branch wins over right-edge for full-width boxes", () => {
    const d = objectDisparity(box(0, 10, 160, 40), box(0, 10, 150, 40), W, H)
    expect(d.dx).toBe(10)
  })

  it("handles the vertical axis symmetrically", () => {
    expect(objectDisparity(box(60, 0, 100, 30), box(45, 3, 85, 33), W, H).dy).toBe(-3)
    expect(objectDisparity(box(30, 50, 70, 80), box(18, 44, 58, 74), W, H).dy).toBe(6)
  })

  it("is zero for identical boxes", () => {
    const d = objectDisparity(box(50, 25, 95, 60), box(50, 25, 95, 60), W, H)
    expect(d.dx).toBe(0)
    expect(d.dy).toBe(0)
  })
})
