import svgwrite

from densepatch.errors import DataError
import densepatch.trainer

WIDTH = 640
HEIGHT = 480
MARGIN = 48

COLORS = {
    densepatch.trainer.TRAIN: 'steelblue',
    densepatch.trainer.VALIDATION: 'darkorange',
}

class _Frame:
    """Maps data coordinates into the plotting area of a drawing."""

    def __init__(self, x0, x1, y0, y1):
        self.x0, self.x1 = x0, (x1 if x1 > x0 else x0 + 1)
        self.y0, self.y1 = y0, (y1 if y1 > y0 else y0 + 1)

    def __call__(self, x, y):
        px = MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)
        py = HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * MARGIN)
        return (round(px, 1), round(py, 1))

def simplify(pts):
    # drop points closer than a pixel to the last one kept
    lastx = None
    lasty = None
    for x, y in pts:
        if lastx is None or (x - lastx) ** 2 + (y - lasty) ** 2 >= 1.0:
            lastx = x
            lasty = y
            yield (x, y)

def _axes(d, frame, xlabel, ylabel):
    axes = d.add(d.g(stroke='black', stroke_width=1, id='axes'))
    axes.add(d.line(frame(frame.x0, frame.y0), frame(frame.x1, frame.y0)))
    axes.add(d.line(frame(frame.x0, frame.y0), frame(frame.x0, frame.y1)))
    labels = d.add(d.g(font_size=12, font_family='sans-serif', id='labels'))
    labels.add(d.text(xlabel, insert=(WIDTH / 2, HEIGHT - MARGIN / 3), text_anchor='middle'))
    labels.add(d.text(ylabel, insert=(MARGIN / 3, HEIGHT / 2), text_anchor='middle',
                      transform='rotate(-90 {} {})'.format(MARGIN / 3, HEIGHT / 2)))
    for x in (frame.x0, frame.x1):
        labels.add(d.text('{:g}'.format(x), insert=frame(x, frame.y0), dy=['1.2em'], text_anchor='middle'))
    for y in (frame.y0, frame.y1):
        labels.add(d.text('{:.3g}'.format(y), insert=frame(frame.x0, y), dx=['-0.3em'], text_anchor='end'))
    return labels

def loss_chart(curve, title='loss'):
    """Train and validation loss against batches processed."""
    series = {split: curve.series(split) for split in COLORS}
    points = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys)]
    if not points:
        raise DataError('curve log has no rows to plot')
    frame = _Frame(0, max(p[0] for p in points), min(0.0, min(p[1] for p in points)), max(p[1] for p in points))

    d = svgwrite.Drawing(size=(WIDTH, HEIGHT))
    d.viewbox(0, 0, WIDTH, HEIGHT)
    labels = _axes(d, frame, 'batches processed', title)
    for i, (split, (xs, ys)) in enumerate(series.items()):
        if not len(xs):
            continue
        line = d.add(d.g(fill='none', stroke=COLORS[split], stroke_width=1.5, id=split))
        line.add(d.polyline(list(simplify(frame(x, y) for x, y in zip(xs, ys)))))
        labels.add(d.text(split, insert=(WIDTH - MARGIN, MARGIN + 16 * i), fill=COLORS[split], text_anchor='end'))
    return d

def roc_chart(roc, auc=None):
    """ROC curve over the unit square, with the chance diagonal."""
    frame = _Frame(0.0, 1.0, 0.0, 1.0)
    d = svgwrite.Drawing(size=(WIDTH, HEIGHT))
    d.viewbox(0, 0, WIDTH, HEIGHT)
    labels = _axes(d, frame, 'false positive rate', 'true positive rate')
    chance = d.add(d.g(fill='none', stroke='gray', stroke_dasharray='4,4', id='chance'))
    chance.add(d.line(frame(0, 0), frame(1, 1)))
    line = d.add(d.g(fill='none', stroke='firebrick', stroke_width=1.5, id='roc'))
    line.add(d.polyline([frame(x, y) for x, y in roc.points]))
    if auc is not None:
        labels.add(d.text('AUC {:.4f}'.format(auc), insert=frame(0.95, 0.05), text_anchor='end'))
    return d

def save(drawing, path):
    with open(str(path), 'w') as f:
        f.write(drawing.tostring())
