"""Small CNN templates modelled on the four backbone families.

Each builder returns a :class:`~cxrcam.graph.ModelGraph` whose final layers
(``group="head"``) form the classification head; everything before is the
backbone that :func:`~cxrcam.graph.freeze` may freeze.

=================  ==========================================================
mini_vgg           blocks of 3x3 conv+ReLU followed by 2x2 max pooling;
                   head flatten -> dense(128, relu) -> dense(K) -> softmax
mini_resnet        conv stem with batchnorm, then residual blocks
                   (conv-bn-relu-conv-bn + skip, relu), each followed by pooling;
                   same head as mini_vgg
mini_xception      strided entry convs, depthwise-separable blocks with pooling,
                   one residual separable block; head GAP -> dense(64) -> dense(K)
mini_effnet_head   strided conv stem and separable stages, each pooled;
                   head GAP -> dropout(0.4) -> dense(225, relu, L2) -> dense(K)
=================  ==========================================================
"""

from __future__ import annotations

from .graph import GraphError, LayerSpec, ModelGraph, init_params

TEMPLATES = ("mini_vgg", "mini_resnet", "mini_xception", "mini_effnet_head")

DEFAULT_HEAD_UNITS = {
    "mini_vgg": 128,
    "mini_resnet": 128,
    "mini_xception": 64,
    "mini_effnet_head": 225,
}


class _Builder:
    def __init__(self):
        self.layers = []
        self.counts = {}

    def add(self, kind, group="backbone", **hp):
        n = self.counts.get(kind, 0) + 1
        self.counts[kind] = n
        lid = f"{kind.replace('-', '_')}_{n}"
        self.layers.append(LayerSpec(lid, kind, hp, group))
        return lid

    @property
    def last(self):
        return self.layers[-1].id

    def conv(self, filters, kernel=3, stride=1, padding=1, activation=None):
        return self.add("conv", filters=filters, kernel=kernel, stride=stride,
                        padding=padding, activation=activation)

    def sepconv(self, filters, kernel=3, stride=1, padding=1, activation=None):
        return self.add("depthwise-separable-conv", filters=filters, kernel=kernel,
                        stride=stride, padding=padding, activation=activation)


def _vgg(b, blocks):
    for filters, convs in blocks:
        for _ in range(convs):
            b.conv(filters, activation="relu")
        b.add("maxpool", window=2, stride=2)


def _resnet(b, stem_filters, n_blocks):
    b.conv(stem_filters)
    b.add("batchnorm")
    b.add("relu")
    b.add("maxpool", window=2, stride=2)
    for _ in range(n_blocks):
        source = b.last
        b.conv(stem_filters)
        b.add("batchnorm")
        b.add("relu")
        b.conv(stem_filters)
        b.add("batchnorm")
        b.add("residual-add", source=source)
        b.add("relu")
        b.add("maxpool", window=2, stride=2)


def _xception(b, entry, stages, middle_blocks):
    b.conv(entry[0], stride=2)
    b.add("batchnorm")
    b.add("relu")
    b.conv(entry[1])
    b.add("batchnorm")
    b.add("relu")
    for filters in stages:
        for _ in range(2):
            b.sepconv(filters)
            b.add("batchnorm")
            b.add("relu")
        b.add("maxpool", window=2, stride=2)
    for _ in range(middle_blocks):
        source = b.last
        b.sepconv(stages[-1])
        b.add("batchnorm")
        b.add("relu")
        b.sepconv(stages[-1])
        b.add("batchnorm")
        b.add("residual-add", source=source)
        b.add("relu")


def _effnet(b, stem_filters, stages, pool=False):
    b.conv(stem_filters, stride=2)
    b.add("batchnorm")
    b.add("relu")
    for filters in stages:
        b.sepconv(filters, stride=1 if pool else 2)
        b.add("batchnorm")
        b.add("relu")
        if pool:
            b.add("maxpool", window=2, stride=2)
        source = b.last
        b.sepconv(filters)
        b.add("batchnorm")
        b.add("residual-add", source=source)
        b.add("relu")


def build_model(template, input_shape=(1, 64, 64), num_classes=4, head_units=None,
                head_activation="relu", seed=0, **options):
    """Build a template graph and its seeded parameters.

    Parameters
    ----------
    template : str
        One of :data:`TEMPLATES`.
    input_shape : tuple
        ``(C, H, W)``; both spatial extents must be at least 32.
    head_units, head_activation :
        Width and activation of the hidden dense head layer. Defaults per
        template are in :data:`DEFAULT_HEAD_UNITS`.
    seed : int
        Seed for He-uniform initialization.
    options :
        Template-specific structure: ``blocks`` for mini_vgg (sequence of
        ``(filters, convs)``), ``n_blocks``/``stem_filters`` for mini_resnet,
        ``entry``/``stages``/``middle_blocks`` for mini_xception,
        ``stem_filters``/``stages``/``pool``/``dropout``/``l2`` for mini_effnet_head
        (``pool`` swaps strided separable convs for stride-1 ones plus max pooling).

    Returns
    -------
    (ModelGraph, ParamStore)
    """
    if template not in TEMPLATES:
        raise GraphError(f"unknown template {template!r}; choose from {TEMPLATES}")
    input_shape = tuple(input_shape)
    if len(input_shape) != 3 or input_shape[1] < 32 or input_shape[2] < 32:
        raise GraphError(f"input must be (C, H, W) with H, W >= 32, got {input_shape}")
    units = head_units if head_units is not None else DEFAULT_HEAD_UNITS[template]
    options = dict(options)
    b = _Builder()

    if template == "mini_vgg":
        _vgg(b, options.pop("blocks", ((8, 2), (16, 2), (32, 2))))
        b.add("flatten", group="head")
        b.add("dense", group="head", units=units, activation=head_activation, l2=False)
    elif template == "mini_resnet":
        _resnet(b, options.pop("stem_filters", 16), options.pop("n_blocks", 2))
        b.add("flatten", group="head")
        b.add("dense", group="head", units=units, activation=head_activation, l2=False)
    elif template == "mini_xception":
        _xception(b, options.pop("entry", (8, 16)), options.pop("stages", (32, 64)),
                  options.pop("middle_blocks", 1))
        b.add("global-avg-pool", group="head")
        b.add("dense", group="head", units=units, activation=head_activation, l2=False)
    else:
        _effnet(b, options.pop("stem_filters", 16), options.pop("stages", (32, 64, 96)),
                options.pop("pool", True))
        b.add("global-avg-pool", group="head")
        b.add("dropout", group="head", rate=options.pop("dropout", 0.4))
        b.add("dense", group="head", units=units, activation=head_activation,
              l2=options.pop("l2", True))
    if options:
        raise GraphError(f"unknown options for {template}: {sorted(options)}")
    b.add("dense", group="head", units=num_classes, activation=None, l2=False)
    b.add("softmax-output", group="head")

    model = ModelGraph(b.layers, input_shape, num_classes)
    return model, init_params(model, seed)
