import { describe, expect, it } from "vitest"

import { AnnotationDoc, parseAnnotation, writeAnnotation } from "../src/voc.js"

function sampleDoc(): AnnotationDoc {
  return {
    folder: "images",
    filename: "pair_00000.png",
    path: "images/pair_00000.png",
    database: "Unknown",
    stackedSize: { width: 160, height: 160, depth: 3 },
    segmented: "0",
    objects: [
      {
        name: "car",
        bndbox: { xmin: 40, ymin: 20, xmax: 90, ymax: 55 },
        delta: { dx: 12, dy: -1.5 },
        bndbox2: { xmin: 28, ymin: 101.5, xmax: 78, ymax: 136.5 },
        pose: "Unspecified",
        truncated: "0",
        difficult: "0",
      },
    ],
  }
}

describe("writeAnnotation", () => {
  it("keeps one decimal on whole deltas and full precision otherwise", () => {
    const xml = writeAnnotation(sampleDoc())
    expect(xml).toContain("<dx>12.0</dx>")
    expect(xml).toContain("<dy>-1.5</dy>")
  })

  it("writes integer coordinates without a decimal point", () => {
    const xml = writeAnnotation(sampleDoc())
    expect(xml).toContain("<xmin>40</xmin>")
    expect(xml).toContain("<ymax>136.5</ymax>")
  })

  it("self-closes empty leaves", () => {
    const doc = { ...sampleDoc(), folder: "", objects: [] }
    expect(writeAnnotation(doc)).toContain("<folder />")
  })

  it("escapes markup characters in text", () => {
    const doc = sampleDoc()
    doc.objects[0].name = "a<b&c>d"
    expect(writeAnnotation(doc)).toContain("<name>a&lt;b&amp;c&gt;d</name>")
  })

  it("refuses boxes on the wrong half of the stack", () => {
    const doc = sampleDoc()
    doc.objects[0].bndbox2 = { xmin: 28, ymin: 10, xmax: 78, ymax: 45 }
    expect(() => writeAnnotation(doc)).toThrow(/half-plane/)
  })
})

describe("parseAnnotation", () => {
  it("round trips a document", () => {
    const doc = sampleDoc()
    expect(parseAnnotation(writeAnnotation(doc))).toEqual(doc)
  })

  it("unescapes entities", () => {
    const doc = sampleDoc()
    doc.objects[0].name = "a<b&c>d"
    expect(parseAnnotation(writeAnnotation(doc)).objects[0].name).toBe("a<b&c>d")
  })

  it("rejects a non-annotation root", () => {
    expect(() => parseAnnotation("<nope></nope>")).toThrow(/expected <annotation>/)
  })

  it("rejects missing box coordinates", () => {
    const broken = writeAnnotation(sampleDoc()).replace("<xmin>40</xmin>", "")
    expect(() => parseAnnotation(broken)).toThrow(/missing <xmin>/)
  })

  it("rejects mismatched tags", () => {
    expect(() => parseAnnotation("<annotation><size></annotation>")).toThrow()
  })
})
