export interface PairInfo {
  id: string
  image_url: string
  annotation_url: string
  size: { width: number; height: number }
}

export async function listPairs(): Promise<PairInfo[]> {
  const resp = await fetch("/pairs")
  if (!resp.ok) throw new Error(`GET /pairs failed: ${resp.status}`)
  return resp.json()
}

export async function getAnnotation(pair: PairInfo): Promise<string | null> {
  const resp = await fetch(pair.annotation_url)
  if (resp.status === 404) return null
  if (!resp.ok) throw new Error(`GET ${pair.annotation_url} failed: ${resp.status}`)
  return resp.text()
}

export async function putAnnotation(pair: PairInfo, xml: string): Promise<void> {
  const resp = await fetch(pair.annotation_url, { method: "PUT", body: xml })
  if (!resp.ok) {
    const detail = await resp.text().catch(() => "")
    throw new Error(`PUT ${pair.annotation_url} failed: ${resp.status} ${detail}`)
  }
}
