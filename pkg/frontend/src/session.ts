import { Box, Disparity, clamp, objectDisparity } from "./geometry.js"
import { AnnotatedObject, AnnotationDoc, parseAnnotation, writeAnnotation } from "./voc.js"

export type View = "left" | "right"

export interface StereoAnnotation {
  name: string
  left: Box // left-view coordinates
  right: Box // right-view coordinates
}

export type SessionOp =
  | { op: "add"; name: string; box: [number, number, number, number] }
  | { op: "drag"; index: number; view: View; to: [number, number] }
  | { op: "nudge"; index: number; view: View; dx: number; dy: number }
  | { op: "resize"; index: number; view: View; edge: keyof Box; value: number }
  | { op: "label"; index: number; name: string }
  | { op: "remove"; index: number }

/**
 * Mutable annotation state for one stereo pair.
 *
 * Both boxes of an object live in their own view's coordinate frame;
 * the stacked-frame offset is applied only at (de)serialization time.
 * Every edit keeps boxes inside the view and at least 1 px wide/tall.
 */
export class AnnotationSession {
  objects: StereoAnnotation[] = []
  selected = -1

  constructor(
    readonly pairId: string,
    readonly viewWidth: number,
    readonly viewHeight: number,
  ) {}

  apply(op: SessionOp): void {
    switch (op.op) {
      case "add": {
        const [x0, y0, x1, y1] = op.box
        const cx0 = clamp(x0, 0, this.viewWidth - 1)
        const cy0 = clamp(y0, 0, this.viewHeight - 1)
        const box: Box = {
          xmin: cx0,
          ymin: cy0,
          xmax: clamp(x1, cx0 + 1, this.viewWidth),
          ymax: clamp(y1, cy0 + 1, this.viewHeight),
        }
        this.objects.push({ name: op.name, left: box, right: { ...box } })
        this.selected = this.objects.length - 1
        break
      }
      case "drag": {
        const box = this.box(op.index, op.view)
        this.moveTo(box, op.to[0], op.to[1])
        break
      }
      case "nudge": {
        const box = this.box(op.index, op.view)
        this.moveTo(box, box.xmin + op.dx, box.ymin + op.dy)
        break
      }
      case "resize": {
        const box = this.box(op.index, op.view)
        const v = op.value
        if (op.edge === "xmin") box.xmin = clamp(v, 0, box.xmax - 1)
        else if (op.edge === "xmax") box.xmax = clamp(v, box.xmin + 1, this.viewWidth)
        else if (op.edge === "ymin") box.ymin = clamp(v, 0, box.ymax - 1)
        else box.ymax = clamp(v, box.ymin + 1, this.viewHeight)
        break
      }
      case "label":
        this.object(op.index).name = op.name
        break
      case "remove":
        this.object(op.index)
        this.objects.splice(op.index, 1)
        if (this.selected >= this.objects.length) this.selected = this.objects.length - 1
        break
    }
  }

  delta(index: number): Disparity {
    const obj = this.object(index)
    return objectDisparity(obj.left, obj.right, this.viewWidth, this.viewHeight)
  }

  toDoc(): AnnotationDoc {
    const objects: AnnotatedObject[] = this.objects.map((obj, i) => ({
      name: obj.name,
      bndbox: { ...obj.left },
      delta: this.delta(i),
      bndbox2: {
        xmin: obj.right.xmin,
        ymin: obj.right.ymin + this.viewHeight,
        xmax: obj.right.xmax,
        ymax: obj.right.ymax + this.viewHeight,
      },
      pose: "Unspecified",
      truncated: "0",
      difficult: "0",
    }))
    return {
      folder: "images",
      filename: `${this.pairId}.png`,
      path: `images/${this.pairId}.png`,
      database: "Unknown",
      stackedSize: { width: this.viewWidth, height: 2 * this.viewHeight, depth: 3 },
      segmented: "0",
      objects,
    }
  }

  serialize(): string {
    return writeAnnotation(this.toDoc())
  }

  static fromXml(pairId: string, xml: string): AnnotationSession {
    const doc = parseAnnotation(xml)
    const viewH = doc.stackedSize.height / 2
    const session = new AnnotationSession(pairId, doc.stackedSize.width, viewH)
    session.objects = doc.objects.map((obj) => ({
      name: obj.name,
      left: { ...obj.bndbox },
      right: {
        xmin: obj.bndbox2.xmin,
        ymin: obj.bndbox2.ymin - viewH,
        xmax: obj.bndbox2.xmax,
        ymax: obj.bndbox2.ymax - viewH,
      },
    }))
    session.selected = session.objects.length ? 0 : -1
    return session
  }

  private object(index: number): StereoAnnotation {
    const obj = this.objects[index]
    if (!obj) throw new RangeError(`no annotation at index ${index}`)
    return obj
  }

  private box(index: number, view: View): Box {
    const obj = this.object(index)
    return view === "left" ? obj.left : obj.right
  }

  private moveTo(box: Box, x: number, y: number): void {
    const bw = box.xmax - box.xmin
    const bh = box.ymax - box.ymin
    box.xmin = clamp(x, 0, this.viewWidth - bw)
    box.ymin = clamp(y, 0, this.viewHeight - bh)
    box.xmax = box.xmin + bw
    box.ymax = box.ymin + bh
  }
}
