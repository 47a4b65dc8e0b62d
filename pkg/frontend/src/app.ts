import { PairInfo, getAnnotation, listPairs, putAnnotation } from "./api.js"
import { Box } from "./geometry.js"
import { AnnotationSession, View } from "./session.js"

const ZOOM = 4
const EDGE_GRAB_PX = 6
const CLASS_KEYS: Record<string, string> = {
  "1": "car",
  "2": "person",
  "3": "bike",
  "4": "trafficsign",
}

type DragMode =
  | { kind: "draw"; view: View; start: [number, number] }
  | { kind: "move"; view: View; index: number; grab: [number, number] }
  | { kind: "resize"; view: View; index: number; edge: keyof Box }

export class App {
  private pairs: PairInfo[] = []
  private at = 0
  private session: AnnotationSession | null = null
  private image = new Image()
  private drag: DragMode | null = null
  private dirty = false

  constructor(
    private canvas: HTMLCanvasElement,
    private objectList: HTMLElement,
    private status: HTMLElement,
  ) {
    canvas.addEventListener("mousedown", (e) => this.onMouseDown(e))
    canvas.addEventListener("mousemove", (e) => this.onMouseMove(e))
    window.addEventListener("mouseup", () => (this.drag = null))
    window.addEventListener("keydown", (e) => this.onKey(e))
  }

  async start(): Promise<void> {
    this.pairs = await listPairs()
    if (!this.pairs.length) {
      this.say("dataset index is empty")
      return
    }
    await this.load(0)
  }

  private async load(at: number): Promise<void> {
    this.at = ((at % this.pairs.length) + this.pairs.length) % this.pairs.length
    const pair = this.pairs[this.at]
    const viewH = pair.size.height / 2
    const xml = await getAnnotation(pair)
    this.session = xml
      ? AnnotationSession.fromXml(pair.id, xml)
      : new AnnotationSession(pair.id, pair.size.width, viewH)
    this.dirty = false
    this.canvas.width = pair.size.width * ZOOM
    this.canvas.height = pair.size.height * ZOOM
    await new Promise<void>((resolve, reject) => {
      this.image.onload = () => resolve()
      this.image.onerror = () => reject(new Error(`image load failed for ${pair.id}`))
      this.image.src = pair.image_url
    })
    this.say(`${pair.id} (${this.at + 1}/${this.pairs.length})`)
    this.render()
  }

  private async save(): Promise<void> {
    if (!this.session) return
    try {
      await putAnnotation(this.pairs[this.at], this.session.serialize())
      this.dirty = false
      this.say(`${this.session.pairId}: saved`)
    } catch (err) {
      this.say(String(err))
    }
  }

  // ----- pointer handling ---------------------------------------------

  private pointer(e: MouseEvent): { view: View; x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect()
    const x = (e.clientX - rect.left) / ZOOM
    const sy = (e.clientY - rect.top) / ZOOM
    const viewH = this.session?.viewHeight ?? 0
    return sy < viewH ? { view: "left", x, y: sy } : { view: "right", x, y: sy - viewH }
  }

  private hit(view: View, x: number, y: number): { index: number; edge: keyof Box | null } | null {
    if (!this.session) return null
    const grab = EDGE_GRAB_PX / ZOOM
    for (let i = this.session.objects.length - 1; i >= 0; i--) {
      const box = view === "left" ? this.session.objects[i].left : this.session.objects[i].right
      if (x < box.xmin - grab || x > box.xmax + grab || y < box.ymin - grab || y > box.ymax + grab)
        continue
      const edges: [keyof Box, number][] = [
        ["xmin", Math.abs(x - box.xmin)],
        ["xmax", Math.abs(x - box.xmax)],
        ["ymin", Math.abs(y - box.ymin)],
        ["ymax", Math.abs(y - box.ymax)],
      ]
      edges.sort((a, b) => a[1] - b[1])
      const edge = edges[0][1] <= grab ? edges[0][0] : null
      if (edge || (x >= box.xmin && x <= box.xmax && y >= box.ymin && y <= box.ymax))
        return { index: i, edge }
    }
    return null
  }

  private onMouseDown(e: MouseEvent): void {
    if (!this.session) return
    const { view, x, y } = this.pointer(e)
    const hit = this.hit(view, x, y)
    if (hit && hit.edge) {
      this.drag = { kind: "resize", view, index: hit.index, edge: hit.edge }
      this.session.selected = hit.index
    } else if (hit) {
      const box = view === "left" ? this.session.objects[hit.index].left : this.session.objects[hit.index].right
      this.drag = { kind: "move", view, index: hit.index, grab: [x - box.xmin, y - box.ymin] }
      this.session.selected = hit.index
    } else if (view === "left") {
      // drawing starts in the left view; the right box starts on top of it
      this.drag = { kind: "draw", view, start: [x, y] }
      this.session.apply({
        op: "add",
        name: "car",
        box: [Math.round(x), Math.round(y), Math.round(x) + 1, Math.round(y) + 1],
      })
    }
    this.render()
  }

  private onMouseMove(e: MouseEvent): void {
    if (!this.session || !this.drag) return
    const { x, y } = this.pointer(e)
    const d = this.drag
    if (d.kind === "draw") {
      const index = this.session.objects.length - 1
      const [sx, sy] = d.start
      for (const [edge, value] of [
        ["xmin", Math.round(Math.min(sx, x))],
        ["xmax", Math.round(Math.max(sx, x))],
        ["ymin", Math.round(Math.min(sy, y))],
        ["ymax", Math.round(Math.max(sy, y))],
      ] as [keyof Box, number][]) {
        this.session.apply({ op: "resize", index, view: "left", edge, value })
        this.session.apply({ op: "resize", index, view: "right", edge, value })
      }
    } else if (d.kind === "move") {
      this.session.apply({
        op: "drag",
        index: d.index,
        view: d.view,
        to: [Math.round(x - d.grab[0]), Math.round(y - d.grab[1])],
      })
    } else {
      const value = d.edge.startsWith("x") ? Math.round(x) : Math.round(y)
      this.session.apply({ op: "resize", index: d.index, view: d.view, edge: d.edge, value })
    }
    this.dirty = true
    this.render()
  }

  // ----- keyboard -----------------------------------------------------

  private onKey(e: KeyboardEvent): void {
    if (!this.session) return
    const index = this.session.selected
    const step = e.shiftKey ? 5 : 1
    const arrows: Record<string, [number, number]> = {
      ArrowLeft: [-step, 0],
      ArrowRight: [step, 0],
      ArrowUp: [0, -step],
      ArrowDown: [0, step],
    }
    if (e.key in arrows && index >= 0) {
      // arrows nudge the right box: that is the disparity adjustment
      const [dx, dy] = arrows[e.key]
      this.session.apply({ op: "nudge", index, view: "right", dx, dy })
      this.dirty = true
      e.preventDefault()
    } else if (e.key in CLASS_KEYS && index >= 0) {
      this.session.apply({ op: "label", index, name: CLASS_KEYS[e.key] })
      this.dirty = true
    } else if ((e.key === "Delete" || e.key === "Backspace") && index >= 0) {
      this.session.apply({ op: "remove", index })
      this.dirty = true
    } else if (e.key === "Tab") {
      if (this.session.objects.length) {
        this.session.selected = (index + 1) % this.session.objects.length
      }
      e.preventDefault()
    } else if (e.key === "s") {
      void this.save()
    } else if (e.key === "n") {
      void this.load(this.at + 1)
    } else if (e.key === "p") {
      void this.load(this.at - 1)
    } else {
      return
    }
    this.render()
  }

  // ----- rendering ----------------------------------------------------

  private render(): void {
    const session = this.session
    if (!session) return
    const ctx = this.canvas.getContext("2d")
    if (!ctx) return
    ctx.imageSmoothingEnabled = false
    ctx.drawImage(this.image, 0, 0, this.canvas.width, this.canvas.height)
    ctx.lineWidth = 2
    session.objects.forEach((obj, i) => {
      const color = i === session.selected ? "#ff4136" : "#2ecc40"
      this.strokeBox(ctx, obj.left, 0, color)
      this.strokeBox(ctx, obj.right, session.viewHeight, color)
      const d = session.delta(i)
      ctx.fillStyle = color
      ctx.font = "14px monospace"
      ctx.fillText(
        `${obj.name} dx=${d.dx.toFixed(1)} dy=${d.dy.toFixed(1)}`,
        obj.left.xmin * ZOOM,
        Math.max(12, obj.left.ymin * ZOOM - 4),
      )
    })
    this.renderList()
  }

  private strokeBox(ctx: CanvasRenderingContext2D, box: Box, yOffset: number, color: string): void {
    ctx.strokeStyle = color
    ctx.strokeRect(
      box.xmin * ZOOM,
      (box.ymin + yOffset) * ZOOM,
      (box.xmax - box.xmin) * ZOOM,
      (box.ymax - box.ymin) * ZOOM,
    )
  }

  private renderList(): void {
    const session = this.session
    if (!session) return
    this.objectList.replaceChildren(
      ...session.objects.map((obj, i) => {
        const d = session.delta(i)
        const li = document.createElement("li")
        li.textContent = `${obj.name}: dx ${d.dx.toFixed(1)} px, dy ${d.dy.toFixed(1)} px`
        if (i === session.selected) li.classList.add("selected")
        li.addEventListener("click", () => {
          session.selected = i
          this.render()
        })
        return li
      }),
    )
  }

  private say(text: string): void {
    this.status.textContent = this.dirty ? `${text} (unsaved)` : text
  }
}
