"""Instruction-relevance aggregation of grid cells into map features.

Each non-empty cell holds J stored grid features.  A relevance matrix
between the cell's features and the instruction tokens is max-pooled
row-wise, softmax-normalized within the cell, and used to weight the
value-projected features into a single embedding.  The cell embedding
plus a projected positional vector (distance and heading of the cell
center) give the cell's map feature.

Because stored grid features never change, their relevance and value
projections are step-invariant; :class:`ProjectionCache` memoizes them
per entry id (and the projected instruction per episode) so rebuilding
the map each step only pays for newly stored features.  Cache hits are
bit-identical to recomputation: both paths project entries one at a
time through the same helper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .grid_memory import CellGeometry, GridMapCells, GridMemoryBank
from .nn import LayerNorm, Linear, ParamItems, softmax, softmax_backward


class AggregationParams:
    """Learned projections for relevance scoring and cell embedding."""

    def __init__(self, rng, feature_dim: int, hidden: int, relevance_dim: int, eps: float, dtype=np.float32) -> None:
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.relevance_dim = relevance_dim
        self.rel_feature = Linear(rng, feature_dim, relevance_dim, bias=False, dtype=dtype)
        self.rel_word = Linear(rng, hidden, relevance_dim, bias=False, dtype=dtype)
        self.value = Linear(rng, feature_dim, hidden, bias=False, dtype=dtype)
        self.positional = Linear(rng, 3, hidden, bias=False, dtype=dtype)
        self.ln_embed = LayerNorm(hidden, eps, dtype)
        self.ln_pos = LayerNorm(hidden, eps, dtype)

    def named_parameters(self, prefix: str) -> ParamItems:
        yield from self.rel_feature.named_parameters(f"{prefix}.rel_feature")
        yield from self.rel_word.named_parameters(f"{prefix}.rel_word")
        yield from self.value.named_parameters(f"{prefix}.value")
        yield from self.positional.named_parameters(f"{prefix}.positional")
        yield from self.ln_embed.named_parameters(f"{prefix}.ln_embed")
        yield from self.ln_pos.named_parameters(f"{prefix}.ln_pos")


def _project_entry(feature: np.ndarray, params: AggregationParams) -> tuple[np.ndarray, np.ndarray]:
    """Relevance and value projections of one stored grid feature."""
    rel = params.rel_feature.weight.value @ feature
    val = params.value.weight.value @ feature
    return rel, val


def _project_words(word_features: np.ndarray, params: AggregationParams) -> np.ndarray:
    return word_features @ params.rel_word.weight.value.T


class ProjectionCache:
    """Memoized projections keyed by entry id, parameter version, and
    instruction version.

    Entry ids are assigned sequentially by the memory bank, so the cache
    keeps one projection row per id and serves whole-bank matrices by
    stacking them.  Rows are always produced by the same per-entry
    helper, which makes cache hits bit-identical to recomputation.
    Writes are idempotent inserts of those deterministic values, so
    concurrent insertion of the same entry is safe.
    """

    def __init__(self) -> None:
        self._rows: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._rel_matrix: np.ndarray | None = None
        self._val_matrix: np.ndarray | None = None
        self._matrix_size = -1
        self._word_proj: np.ndarray | None = None
        self._word_tag: object = None
        self._param_version: int | None = None
        self.feature_hits = 0
        self.feature_misses = 0
        self.word_hits = 0
        self.word_misses = 0

    def reset_counters(self) -> None:
        self.feature_hits = 0
        self.feature_misses = 0
        self.word_hits = 0
        self.word_misses = 0

    def validate(self, param_version: int) -> None:
        """Drop everything if the parameters changed since the last use."""
        if self._param_version != param_version:
            self._rows.clear()
            self._rel_matrix = None
            self._val_matrix = None
            self._matrix_size = -1
            self._word_proj = None
            self._word_tag = None
            self._param_version = param_version

    def entry_projections(
        self, entry_id: int, feature: np.ndarray, params: AggregationParams
    ) -> tuple[np.ndarray, np.ndarray]:
        hit = self._rows.get(entry_id)
        if hit is not None:
            self.feature_hits += 1
            return hit
        self.feature_misses += 1
        pair = _project_entry(feature, params)
        self._rows[entry_id] = pair
        return pair

    def full_projections(
        self, bank, params: AggregationParams
    ) -> tuple[np.ndarray, np.ndarray]:
        """Projection matrices covering every bank entry, cache-served."""
        n = len(bank)
        hits = 0
        for i in range(n):
            if i in self._rows:
                hits += 1
            else:
                self._rows[i] = _project_entry(bank.feature(i), params)
        self.feature_hits += hits
        self.feature_misses += n - hits
        if self._matrix_size != n:
            if n:
                self._rel_matrix = np.stack([self._rows[i][0] for i in range(n)])
                self._val_matrix = np.stack([self._rows[i][1] for i in range(n)])
            else:
                self._rel_matrix = np.empty((0, params.relevance_dim))
                self._val_matrix = np.empty((0, params.hidden))
            self._matrix_size = n
        return self._rel_matrix, self._val_matrix

    def word_projection(
        self, word_features: np.ndarray, instruction_tag: object, params: AggregationParams
    ) -> np.ndarray:
        if self._word_proj is not None and self._word_tag == instruction_tag:
            self.word_hits += 1
            return self._word_proj
        self.word_misses += 1
        self._word_proj = _project_words(word_features, params)
        self._word_tag = instruction_tag
        return self._word_proj


def _project_bank(bank, params: AggregationParams) -> tuple[np.ndarray, np.ndarray]:
    """Uncached whole-bank projections through the same per-entry helper."""
    rel_rows = []
    val_rows = []
    for i in range(len(bank)):
        rel, val = _project_entry(bank.feature(i), params)
        rel_rows.append(rel)
        val_rows.append(val)
    if not rel_rows:
        return (
            np.empty((0, params.relevance_dim)),
            np.empty((0, params.hidden)),
        )
    return np.stack(rel_rows), np.stack(val_rows)


def relevance_matrix(
    cell_features: np.ndarray,
    word_features: np.ndarray,
    params: AggregationParams,
    cache: ProjectionCache | None = None,
    entry_ids: np.ndarray | None = None,
    instruction_tag: object = None,
) -> np.ndarray:
    """J x L relevance of each cell feature to each instruction token."""
    cell_features = np.asarray(cell_features)
    word_features = np.asarray(word_features)
    if cell_features.ndim != 2 or cell_features.shape[1] != params.feature_dim:
        raise DimensionError(
            f"cell features must be (J, {params.feature_dim}), got {cell_features.shape}"
        )
    if word_features.ndim != 2 or word_features.shape[1] != params.hidden:
        raise DimensionError(
            f"word features must be (L, {params.hidden}), got {word_features.shape}"
        )
    rel_rows = _stack_rel_rows(cell_features, params, cache, entry_ids)
    if cache is not None:
        word_proj = cache.word_projection(word_features, instruction_tag, params)
    else:
        word_proj = _project_words(word_features, params)
    return rel_rows @ word_proj.T


def _stack_rel_rows(cell_features, params, cache, entry_ids) -> np.ndarray:
    rows = []
    for j in range(cell_features.shape[0]):
        if cache is not None and entry_ids is not None:
            rel, _ = cache.entry_projections(int(entry_ids[j]), cell_features[j], params)
        else:
            rel, _ = _project_entry(cell_features[j], params)
        rows.append(rel)
    return np.stack(rows)


def _stack_val_rows(cell_features, params, cache, entry_ids) -> np.ndarray:
    rows = []
    for j in range(cell_features.shape[0]):
        if cache is not None and entry_ids is not None:
            _, val = cache.entry_projections(int(entry_ids[j]), cell_features[j], params)
        else:
            _, val = _project_entry(cell_features[j], params)
        rows.append(val)
    return np.stack(rows)


def _stack_projections(cell_features, params, cache, entry_ids) -> tuple[np.ndarray, np.ndarray]:
    """One cache lookup per entry, returning both projection stacks."""
    rel_rows = []
    val_rows = []
    for j in range(cell_features.shape[0]):
        if cache is not None and entry_ids is not None:
            rel, val = cache.entry_projections(int(entry_ids[j]), cell_features[j], params)
        else:
            rel, val = _project_entry(cell_features[j], params)
        rel_rows.append(rel)
        val_rows.append(val)
    return np.stack(rel_rows), np.stack(val_rows)


def relevance_scores(matrix: np.ndarray) -> np.ndarray:
    """Row-wise max pooling of the relevance matrix."""
    matrix = np.asarray(matrix)
    if matrix.size == 0:
        raise DimensionError("relevance matrix must be non-empty")
    return matrix.max(axis=1)


def aggregate_cell(
    cell_features: np.ndarray,
    alpha: np.ndarray,
    params: AggregationParams,
    cache: ProjectionCache | None = None,
    entry_ids: np.ndarray | None = None,
) -> np.ndarray:
    """Softmax-weighted sum of value-projected features within one cell."""
    val_rows = _stack_val_rows(np.asarray(cell_features), params, cache, entry_ids)
    eta = softmax(np.asarray(alpha))
    return eta @ val_rows


@dataclass
class MapFeatureGrid:
    """Aggregated per-cell map features with a validity mask."""

    features: np.ndarray      # (N, N, hidden)
    valid: np.ndarray         # (N, N) bool, False marks empty cells
    tokens: np.ndarray        # (n_valid, hidden), row i belongs to cell_list[i]
    cell_list: list[tuple[int, int]]


@dataclass
class _CellTape:
    ids: np.ndarray
    features: np.ndarray
    rel_rows: np.ndarray | None
    val_rows: np.ndarray
    eta: np.ndarray
    argmax_cols: np.ndarray | None


@dataclass
class AggregationTape:
    cells: list[_CellTape]
    word_proj: np.ndarray | None
    word_features: np.ndarray
    embeds: np.ndarray
    pos_inputs: np.ndarray
    ln_embed_cache: tuple
    ln_pos_cache: tuple
    average_pooling: bool


def map_features(
    embed_grid: np.ndarray,
    valid: np.ndarray,
    cell_geometry: CellGeometry,
    params: AggregationParams,
) -> np.ndarray:
    """Combine cell embeddings with projected positional information.

    Returns the (N, N, hidden) map feature grid; invalid cells are left
    as zeros and stay masked downstream.
    """
    scale = valid.shape[0]
    if embed_grid.shape[:2] != (scale, scale) or cell_geometry.distance.shape != (scale, scale):
        raise DimensionError(
            f"grid scale mismatch: embeddings {embed_grid.shape}, "
            f"geometry {cell_geometry.distance.shape}"
        )
    out = np.zeros_like(embed_grid)
    ms, ns = np.nonzero(valid)
    if ms.size == 0:
        return out
    embeds = embed_grid[ms, ns]
    pos_in = np.stack(
        [cell_geometry.distance[ms, ns], cell_geometry.sin_phi[ms, ns], cell_geometry.cos_phi[ms, ns]],
        axis=1,
    ).astype(embed_grid.dtype)
    normed_e, _ = params.ln_embed.forward(embeds)
    pos_proj, _ = params.positional.forward(pos_in)
    normed_p, _ = params.ln_pos.forward(pos_proj)
    out[ms, ns] = normed_e + normed_p
    return out


def aggregate_map(
    bank: GridMemoryBank,
    cells: GridMapCells,
    geom: CellGeometry,
    word_features: np.ndarray,
    params: AggregationParams,
    cache: ProjectionCache | None = None,
    instruction_tag: object = None,
    average_pooling: bool = False,
) -> tuple[MapFeatureGrid, AggregationTape]:
    """Aggregate every non-empty cell of one map snapshot.

    The relevance path follows: per-cell relevance matrix against the
    instruction, row-wise max, softmax weights, weighted sum of value
    projections.  ``average_pooling`` replaces the weights with uniform
    ones (the ablation path) and skips relevance entirely.
    """
    scale = cells.scale
    dtype = word_features.dtype
    word_proj = None
    if not average_pooling:
        if cache is not None:
            word_proj = cache.word_projection(word_features, instruction_tag, params)
        else:
            word_proj = _project_words(word_features, params)
    if cache is not None:
        rel_matrix, val_matrix = cache.full_projections(bank, params)
    else:
        rel_matrix, val_matrix = _project_bank(bank, params)

    cell_tapes: list[_CellTape] = []
    cell_list: list[tuple[int, int]] = []
    valid = np.zeros((scale, scale), dtype=bool)
    embed_rows = []
    pos_rows = []
    for m in range(scale):
        for n in range(scale):
            ids = cells.cell_entries(m, n)
            if ids.size == 0:
                continue
            feats = bank.features[ids]
            val_rows = val_matrix[ids]
            if average_pooling:
                eta = np.full(ids.size, 1.0 / ids.size, dtype=dtype)
                rel_rows = None
                argmax_cols = None
            else:
                rel_rows = rel_matrix[ids]
                matrix = rel_rows @ word_proj.T
                alpha = matrix.max(axis=1)
                argmax_cols = matrix.argmax(axis=1)
                eta = softmax(alpha)
            embed = eta @ val_rows
            valid[m, n] = True
            cell_list.append((m, n))
            embed_rows.append(embed)
            pos_rows.append([geom.distance[m, n], geom.sin_phi[m, n], geom.cos_phi[m, n]])
            cell_tapes.append(
                _CellTape(
                    ids=ids,
                    features=feats,
                    rel_rows=rel_rows,
                    val_rows=val_rows,
                    eta=eta,
                    argmax_cols=argmax_cols,
                )
            )

    embeds = np.stack(embed_rows) if embed_rows else np.empty((0, params.hidden), dtype=dtype)
    pos_inputs = np.asarray(pos_rows, dtype=dtype).reshape(-1, 3)
    normed_e, ln_embed_cache = params.ln_embed.forward(embeds) if embed_rows else (embeds, ())
    if embed_rows:
        pos_proj, pos_cache = params.positional.forward(pos_inputs)
        normed_p, ln_pos_cache = params.ln_pos.forward(pos_proj)
        tokens = normed_e + normed_p
    else:
        pos_cache = ()
        ln_pos_cache = ()
        tokens = embeds

    grid = np.zeros((scale, scale, params.hidden), dtype=dtype)
    for i, (m, n) in enumerate(cell_list):
        grid[m, n] = tokens[i]

    tape = AggregationTape(
        cells=cell_tapes,
        word_proj=word_proj,
        word_features=word_features,
        embeds=embeds,
        pos_inputs=pos_inputs,
        ln_embed_cache=ln_embed_cache,
        ln_pos_cache=(pos_cache, ln_pos_cache),
        average_pooling=average_pooling,
    )
    return MapFeatureGrid(features=grid, valid=valid, tokens=tokens, cell_list=cell_list), tape


def aggregate_map_backward(
    d_tokens: np.ndarray,
    tape: AggregationTape,
    params: AggregationParams,
) -> np.ndarray:
    """Backpropagate through one map aggregation.

    Accumulates parameter gradients and returns the gradient w.r.t. the
    word features (the only live upstream input; stored grid features
    are constants).
    """
    d_words = np.zeros_like(tape.word_features)
    if not tape.cells:
        return d_words
    pos_cache, ln_pos_cache = tape.ln_pos_cache
    d_pos_proj = params.ln_pos.backward(d_tokens, ln_pos_cache)
    params.positional.backward(d_pos_proj, pos_cache)
    d_embeds = params.ln_embed.backward(d_tokens, tape.ln_embed_cache)

    d_word_proj = np.zeros_like(tape.word_proj) if tape.word_proj is not None else None
    for i, cell in enumerate(tape.cells):
        d_embed = d_embeds[i]
        d_val_rows = cell.eta[:, np.newaxis] * d_embed[np.newaxis, :]
        params.value.weight.grad += d_val_rows.T @ cell.features
        if tape.average_pooling:
            continue
        d_eta = cell.val_rows @ d_embed
        d_alpha = softmax_backward(d_eta, cell.eta)
        # row-wise max routes each cell feature's gradient to its best token
        d_rel_rows = d_alpha[:, np.newaxis] * tape.word_proj[cell.argmax_cols]
        np.add.at(d_word_proj, cell.argmax_cols, d_alpha[:, np.newaxis] * cell.rel_rows)
        params.rel_feature.weight.grad += d_rel_rows.T @ cell.features
    if d_word_proj is not None:
        params.rel_word.weight.grad += d_word_proj.T @ tape.word_features
        d_words += d_word_proj @ params.rel_word.weight.value
    return d_words
