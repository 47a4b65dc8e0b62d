import { App } from "./app.js"

const canvas = document.getElementById("stack") as HTMLCanvasElement
const objectList = document.getElementById("objects") as HTMLElement
const status = document.getElementById("status") as HTMLElement

const app = new App(canvas, objectList, status)
app.start().catch((err) => {
  status.textContent = String(err)
})
