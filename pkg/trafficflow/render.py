"""
Figures of a flow field: every cell colored by its flow direction (hue) and its
density (brightness), with the ROI outline and any paths drawn on top.
"""

import logging

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
from matplotlib.colors import hsv_to_rgb
import numpy as np


logger = logging.getLogger(__name__)

PATH_COLORS = ('white', 'black')


def field_image(field, channel_ids=None):
    """
    An (nrows, ncols, 3) RGB image over the field window. Where channels overlap,
    the denser one colors the cell. Brightness grows with log density.
    """
    channel_ids = field.channel_ids if channel_ids is None else channel_ids
    density = np.zeros((field.ncols, field.nrows))
    angle = np.zeros((field.ncols, field.nrows))
    for cid in channel_ids:
        layer_density, layer_direction = field.dense(cid)
        denser = layer_density > density
        density[denser] = layer_density[denser]
        angle[denser] = np.arctan2(layer_direction[denser][:, 1], layer_direction[denser][:, 0])
    peak = max(1.0, float(density.max(initial=0.0)))
    value = np.log1p(density) / np.log1p(peak)
    hsv = np.stack([(angle / (2 * np.pi)) % 1.0, np.where(density > 0, 1.0, 0.0), value], axis=-1)
    return hsv_to_rgb(hsv).transpose(1, 0, 2)


def plot_field(field, roi=None, paths=(), smoothed=(), title=None, figsize=(8, 8)):
    figure, axes = plt.subplots(figsize=figsize)
    axes.set_facecolor('black')
    if field.ncols and field.nrows:
        r = field.resolution
        x0 = field.frame.origin_x + field.ix0 * r
        y0 = field.frame.origin_y + field.iy0 * r
        extent = (x0, x0 + field.ncols * r, y0, y0 + field.nrows * r)
        axes.imshow(field_image(field), origin='lower', extent=extent, interpolation='nearest')
    if roi is not None:
        outline = np.vstack([roi.polygon.vertices, roi.polygon.vertices[:1]])
        axes.plot(outline[:, 0], outline[:, 1], color='yellow', linewidth=1.0, linestyle='--')
        for index in range(roi.num_edges):
            if roi.refined[index]:
                edge = roi.edges[index]
                axes.plot(edge[:, 0], edge[:, 1], color='yellow', linewidth=2.0)
    for polylines, color, width in ((paths, PATH_COLORS[0], 0.8), (smoothed, PATH_COLORS[1], 1.5)):
        for polyline in polylines:
            axes.plot(polyline.points[:, 0], polyline.points[:, 1], color=color, linewidth=width)
    label = title or 'roi {}'.format(field.roi_id)
    axes.set_title('{} ({} trips, {} channels, {} cells)'.format(
        label, field.trip_count, len(field.channel_ids), field.stored_cells))
    axes.set_aspect('equal')
    axes.set_xlabel('x [m]')
    axes.set_ylabel('y [m]')
    return figure


def render_svg(path, field, roi=None, paths=(), smoothed=(), title=None):
    """Writes the figure as SVG without timestamps or random ids."""
    with matplotlib.rc_context({'svg.hashsalt': 'trafficflow', 'svg.fonttype': 'none'}):
        figure = plot_field(field, roi, paths, smoothed, title)
        figure.savefig(path, format='svg', metadata={'Date': None})
    plt.close(figure)
    logger.info('rendered %d channels to %s', len(field.channel_ids), path)
