import { Box, Disparity } from "./geometry.js"

export interface AnnotatedObject {
  name: string
  bndbox: Box // left-view half of the stacked frame
  delta: Disparity
  bndbox2: Box // right-view half; y offset by the view height
  pose: string
  truncated: string
  difficult: string
}

export interface AnnotationDoc {
  folder: string
  filename: string
  path: string
  database: string
  stackedSize: { width: number; height: number; depth: number }
  segmented: string
  objects: AnnotatedObject[]
}

function escapeText(s: string): string {
  return s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;")
}

function fmtCoord(v: number): string {
  return String(v)
}

function fmtDelta(v: number): string {
  return Math.round(v * 10) / 10 === v ? v.toFixed(1) : String(v)
}

class XmlBuilder {
  private lines: string[] = []
  private depth = 0

  open(tag: string) {
    this.lines.push(`${"  ".repeat(this.depth)}<${tag}>`)
    this.depth += 1
  }

  close(tag: string) {
    this.depth -= 1
    this.lines.push(`${"  ".repeat(this.depth)}</${tag}>`)
  }

  leaf(tag: string, text: string) {
    const pad = "  ".repeat(this.depth)
    // empty leaves serialize self-closed, matching the backend writer
    this.lines.push(text === "" ? `${pad}<${tag} />` : `${pad}<${tag}>${escapeText(text)}</${tag}>`)
  }

  toString(): string {
    return this.lines.join("\n")
  }
}

/** Serialize to extended-VOC XML, byte-identical to the backend writer. */
export function writeAnnotation(doc: AnnotationDoc): string {
  const viewH = doc.stackedSize.height / 2
  const b = new XmlBuilder()
  b.open("annotation")
  b.leaf("folder", doc.folder)
  b.leaf("filename", doc.filename)
  b.leaf("path", doc.path)
  b.open("source")
  b.leaf("database", doc.database)
  b.close("source")
  b.open("size")
  b.leaf("width", String(doc.stackedSize.width))
  b.leaf("height", String(doc.stackedSize.height))
  b.leaf("depth", String(doc.stackedSize.depth))
  b.close("size")
  b.leaf("segmented", doc.segmented)
  for (const obj of doc.objects) {
    if (obj.bndbox.ymax > viewH || obj.bndbox2.ymin < viewH) {
      throw new Error("object violates stacked half-plane invariants")
    }
    b.open("object")
    b.leaf("name", obj.name)
    b.leaf("pose", obj.pose)
    b.leaf("truncated", obj.truncated)
    b.leaf("difficult", obj.difficult)
    b.open("bndbox")
    b.leaf("xmin", fmtCoord(obj.bndbox.xmin))
    b.leaf("ymin", fmtCoord(obj.bndbox.ymin))
    b.leaf("xmax", fmtCoord(obj.bndbox.xmax))
    b.leaf("ymax", fmtCoord(obj.bndbox.ymax))
    b.close("bndbox")
    b.open("delta")
    b.leaf("dx", fmtDelta(obj.delta.dx))
    b.leaf("dy", fmtDelta(obj.delta.dy))
    b.close("delta")
    b.open("bndbox2")
    b.leaf("xmin", fmtCoord(obj.bndbox2.xmin))
    b.leaf("ymin", fmtCoord(obj.bndbox2.ymin))
    b.leaf("xmax", fmtCoord(obj.bndbox2.xmax))
    b.leaf("ymax", fmtCoord(obj.bndbox2.ymax))
    b.close("bndbox2")
    b.close("object")
  }
  b.close("annotation")
  return b.toString()
}

// ---------------------------------------------------------------------------
// minimal parser for the same schema (loading saved annotations)

interface XmlNode {
  tag: string
  text: string
  children: XmlNode[]
}

function unescapeText(s: string): string {
  return s.replace(/&lt;/g, "<").replace(/&gt;/g, ">").replace(/&amp;/g, "&")
}

function parseXml(src: string): XmlNode {
  const tokens = src.match(/<[^>]+>|[^<]+/g) ?? []
  const root: XmlNode = { tag: "", text: "", children: [] }
  const stack: XmlNode[] = [root]
  for (const tok of tokens) {
    const top = stack[stack.length - 1]
    if (!tok.startsWith("<")) {
      top.text += unescapeText(tok)
    } else if (tok.startsWith("<?") || tok.startsWith("<!--")) {
      continue
    } else if (tok.startsWith("</")) {
      const tag = tok.slice(2, -1).trim()
      if (top.tag !== tag) throw new Error(`mismatched </${tag}>`)
      top.text = top.children.length ? "" : top.text.trim()
      stack.pop()
    } else if (tok.endsWith("/>")) {
      top.children.push({ tag: tok.slice(1, -2).trim(), text: "", children: [] })
    } else {
      const node: XmlNode = { tag: tok.slice(1, -1).trim().split(/\s/)[0], text: "", children: [] }
      top.children.push(node)
      stack.push(node)
    }
  }
  if (stack.length !== 1 || root.children.length !== 1) throw new Error("malformed XML document")
  return root.children[0]
}

function child(node: XmlNode, tag: string): XmlNode {
  const found = node.children.find((c) => c.tag === tag)
  if (!found) throw new Error(`missing <${tag}>`)
  return found
}

function childText(node: XmlNode, tag: string, fallback?: string): string {
  const found = node.children.find((c) => c.tag === tag)
  if (!found) {
    if (fallback !== undefined) return fallback
    throw new Error(`missing <${tag}>`)
  }
  return found.text
}

function parseBox(node: XmlNode): Box {
  const num = (tag: string) => {
    const v = Number(childText(node, tag))
    if (!Number.isFinite(v)) throw new Error(`non-numeric <${tag}>`)
    return v
  }
  return { xmin: num("xmin"), ymin: num("ymin"), xmax: num("xmax"), ymax: num("ymax") }
}

export function parseAnnotation(xml: string): AnnotationDoc {
  const root = parseXml(xml)
  if (root.tag !== "annotation") throw new Error(`root is <${root.tag}>, expected <annotation>`)
  const size = child(root, "size")
  const doc: AnnotationDoc = {
    folder: childText(root, "folder", ""),
    filename: childText(root, "filename", ""),
    path: childText(root, "path", ""),
    database: root.children.some((c) => c.tag === "source")
      ? childText(child(root, "source"), "database", "Unknown")
      : "Unknown",
    stackedSize: {
      width: Number(childText(size, "width")),
      height: Number(childText(size, "height")),
      depth: Number(childText(size, "depth")),
    },
    segmented: childText(root, "segmented", "0"),
    objects: [],
  }
  for (const objEl of root.children.filter((c) => c.tag === "object")) {
    const deltaEl = child(objEl, "delta")
    doc.objects.push({
      name: childText(objEl, "name"),
      bndbox: parseBox(child(objEl, "bndbox")),
      delta: { dx: Number(childText(deltaEl, "dx")), dy: Number(childText(deltaEl, "dy")) },
      bndbox2: parseBox(child(objEl, "bndbox2")),
      pose: childText(objEl, "pose", "Unspecified"),
      truncated: childText(objEl, "truncated", "0"),
      difficult: childText(objEl, "difficult", "0"),
    })
  }
  return doc
}
