#include "tape.hpp"

#include <cmath>

#include "rng.hpp"

namespace attrib {

namespace {

double gelu_derivative(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return normal_cdf(x) + x * phi;
}

}  // namespace

int Tape::emit(LayerRecord rec) {
    records_.push_back(std::move(rec));
    return static_cast<int>(records_.size() - 1);
}

Tensor Tape::compute(const LayerRecord& rec) const {
    auto p = [&](std::size_t i) -> const Tensor& {
        return records_[static_cast<std::size_t>(rec.parents[i])].value;
    };
    switch (rec.kind) {
        case OpKind::Input:
        case OpKind::Param:
            return rec.value;
        case OpKind::MatMul:
            return attrib::matmul(p(0), p(1));
        case OpKind::Add:
            return attrib::add(p(0), p(1));
        case OpKind::Softmax:
            return softmax_lastdim(p(0));
        case OpKind::Gelu:
            return attrib::gelu(p(0));
        case OpKind::LayerNorm:
            return attrib::layer_norm(p(0), p(1), p(2), rec.ln_eps);
        case OpKind::Linear:
            return attrib::linear(p(0), p(1), p(2));
        case OpKind::Scale: {
            Tensor out(p(0).shape());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = p(0)[i] * rec.scale_factor;
            return out;
        }
        case OpKind::Transpose: {
            const Tensor& x = p(0);
            if (x.rank() == 2) {
                Tensor out({x.extent(1), x.extent(0)});
                for (std::size_t i = 0; i < x.extent(0); ++i)
                    for (std::size_t j = 0; j < x.extent(1); ++j) out.at(j, i) = x.at(i, j);
                return out;
            }
            Tensor out({x.extent(0), x.extent(2), x.extent(1)});
            for (std::size_t h = 0; h < x.extent(0); ++h)
                for (std::size_t i = 0; i < x.extent(1); ++i)
                    for (std::size_t j = 0; j < x.extent(2); ++j) out.at(h, j, i) = x.at(h, i, j);
            return out;
        }
        case OpKind::SplitHeads: {
            const Tensor& x = p(0);
            const std::size_t s = x.extent(0), d = x.extent(1);
            const std::size_t hh = rec.heads, dh = d / hh;
            Tensor out({hh, s, dh});
            for (std::size_t h = 0; h < hh; ++h)
                for (std::size_t i = 0; i < s; ++i)
                    for (std::size_t j = 0; j < dh; ++j) out.at(h, i, j) = x.at(i, h * dh + j);
            return out;
        }
        case OpKind::MergeHeads: {
            const Tensor& x = p(0);
            const std::size_t hh = x.extent(0), s = x.extent(1), dh = x.extent(2);
            Tensor out({s, hh * dh});
            for (std::size_t h = 0; h < hh; ++h)
                for (std::size_t i = 0; i < s; ++i)
                    for (std::size_t j = 0; j < dh; ++j) out.at(i, h * dh + j) = x.at(h, i, j);
            return out;
        }
        case OpKind::ConcatRows: {
            const Tensor& a = p(0);
            const Tensor& b = p(1);
            if (a.extent(1) != b.extent(1)) {
                throw ShapeError("concat_rows column mismatch: " + a.shape_str() + " vs " + b.shape_str());
            }
            Tensor out({a.extent(0) + b.extent(0), a.extent(1)});
            for (std::size_t i = 0; i < a.extent(0); ++i)
                for (std::size_t j = 0; j < a.extent(1); ++j) out.at(i, j) = a.at(i, j);
            for (std::size_t i = 0; i < b.extent(0); ++i)
                for (std::size_t j = 0; j < b.extent(1); ++j) out.at(a.extent(0) + i, j) = b.at(i, j);
            return out;
        }
        case OpKind::SelectRow: {
            const Tensor& x = p(0);
            Tensor out({1, x.extent(1)});
            for (std::size_t j = 0; j < x.extent(1); ++j) out[j] = x.at(rec.row, j);
            return out;
        }
    }
    throw std::logic_error("unreachable op kind");
}

int Tape::add_input(Tensor value) {
    LayerRecord r;
    r.kind = OpKind::Input;
    r.value = std::move(value);
    return emit(std::move(r));
}

int Tape::add_param(Tensor value) {
    LayerRecord r;
    r.kind = OpKind::Param;
    r.value = std::move(value);
    return emit(std::move(r));
}

int Tape::matmul(int a, int b) {
    LayerRecord r;
    r.kind = OpKind::MatMul;
    r.parents = {a, b};
    r.value = compute(r);
    return emit(std::move(r));
}

int Tape::add(int a, int b) {
    LayerRecord r;
    r.kind = OpKind::Add;
    r.parents = {a, b};
    r.value = compute(r);
    return emit(std::move(r));
}

int Tape::softmax(int x, int block_index, bool is_attention_map) {
    LayerRecord r;
    r.kind = OpKind::Softmax;
    r.parents = {x};
    r.block_index = block_index;
    r.is_attention_map = is_attention_map;
    r.value = compute(r);
    return emit(std::move(r));
}

int Tape::gelu(int x) {
    LayerRecord r;
    r.kind = OpKind::Gelu;
    r.parents = {x};
    r.value = compute(r);
    return emit(std::move(r));
}

int Tape::layer_norm(int x, int gamma, int beta, double eps) {
    LayerRecord r;
    r.kind = OpKind::LayerNorm;
    r.parents = {x, gamma, beta};
    r.ln_eps = eps;
    r.value = compute(r);
    return emit(std::move(r));
}

int Tape::linear(int x, int w, int bias) {
    LayerRecord r;
    r.kind = OpKind::Linear;
    r.parents = {x, w, bias};
    r.value = compute(r);
    return emit(std::move(r));
}

int Tape::scale(int x, double factor) {
    LayerRecord r;
    r.kind = OpKind::Scale;
    r.parents = {x};
    r.scale_factor = factor;
    r.value = compute(r);
    return emit(std::move(r));
}

int Tape::transpose(int x) {
    LayerRecord r;
    r.kind = OpKind::Transpose;
    r.parents = {x};
    r.value = compute(r);
    return emit(std::move(r));
}

int Tape::split_heads(int x, std::size_t heads) {
    LayerRecord r;
    r.kind = OpKind::SplitHeads;
    r.parents = {x};
    r.heads = heads;
    r.value = compute(r);
    return emit(std::move(r));
}

int Tape::merge_heads(int x) {
    LayerRecord r;
    r.kind = OpKind::MergeHeads;
    r.parents = {x};
    r.value = compute(r);
    return emit(std::move(r));
}

int Tape::concat_rows(int a, int b) {
    LayerRecord r;
    r.kind = OpKind::ConcatRows;
    r.parents = {a, b};
    r.value = compute(r);
    return emit(std::move(r));
}

int Tape::select_row(int x, std::size_t row) {
    LayerRecord r;
    r.kind = OpKind::SelectRow;
    r.parents = {x};
    r.row = row;
    r.value = compute(r);
    return emit(std::move(r));
}

std::vector<int> Tape::attention_nodes() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < records_.size(); ++i)
        if (records_[i].is_attention_map) out.push_back(static_cast<int>(i));
    return out;
}

void Tape::set_leaf_value(int node, Tensor value) {
    LayerRecord& rec = records_[static_cast<std::size_t>(node)];
    if (rec.kind != OpKind::Input && rec.kind != OpKind::Param) {
        throw std::invalid_argument("set_leaf_value on non-leaf record");
    }
    if (!rec.value.same_shape(value)) {
        throw ShapeError("leaf value shape " + value.shape_str() + " does not match " + rec.value.shape_str());
    }
    rec.value = std::move(value);
}

void Tape::replay() {
    for (auto& rec : records_) {
        if (rec.kind == OpKind::Input || rec.kind == OpKind::Param) continue;
        rec.value = compute(rec);
    }
}

Gradients Tape::backward(std::size_t target_class) const {
    if (logits_node_ < 0) throw std::logic_error("tape has no logits node");
    const Tensor& logits = records_[static_cast<std::size_t>(logits_node_)].value;
    if (target_class >= logits.size()) {
        throw std::out_of_range("target class " + std::to_string(target_class) + " out of range for " +
                                std::to_string(logits.size()) + " classes");
    }
    Tensor seed = Tensor::zeros(logits.shape());
    seed[target_class] = 1.0;
    return backward_with_seed(seed);
}

Gradients Tape::backward_with_seed(const Tensor& seed) const {
    if (logits_node_ < 0) throw std::logic_error("tape has no logits node");
    const Tensor& logits = records_[static_cast<std::size_t>(logits_node_)].value;
    if (!seed.same_shape(logits)) {
        throw ShapeError("backward seed shape " + seed.shape_str() + " does not match logits " +
                         logits.shape_str());
    }

    Gradients g;
    g.by_node.resize(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) g.by_node[i] = Tensor::zeros(records_[i].value.shape());
    g.by_node[static_cast<std::size_t>(logits_node_)] = seed;

    for (std::size_t idx = records_.size(); idx-- > 0;) {
        const LayerRecord& rec = records_[idx];
        const Tensor& gout = g.by_node[idx];
        auto pv = [&](std::size_t i) -> const Tensor& {
            return records_[static_cast<std::size_t>(rec.parents[i])].value;
        };
        auto pg = [&](std::size_t i) -> Tensor& {
            return g.by_node[static_cast<std::size_t>(rec.parents[i])];
        };
        switch (rec.kind) {
            case OpKind::Input:
            case OpKind::Param:
                break;
            case OpKind::MatMul: {
                const Tensor& a = pv(0);
                const Tensor& b = pv(1);
                Tensor& ga = pg(0);
                Tensor& gb = pg(1);
                if (a.rank() == 2) {
                    for (std::size_t i = 0; i < a.extent(0); ++i)
                        for (std::size_t p = 0; p < a.extent(1); ++p)
                            for (std::size_t j = 0; j < b.extent(1); ++j) {
                                ga.at(i, p) += gout.at(i, j) * b.at(p, j);
                                gb.at(p, j) += a.at(i, p) * gout.at(i, j);
                            }
                } else {
                    for (std::size_t h = 0; h < a.extent(0); ++h)
                        for (std::size_t i = 0; i < a.extent(1); ++i)
                            for (std::size_t p = 0; p < a.extent(2); ++p)
                                for (std::size_t j = 0; j < b.extent(2); ++j) {
                                    ga.at(h, i, p) += gout.at(h, i, j) * b.at(h, p, j);
                                    gb.at(h, p, j) += a.at(h, i, p) * gout.at(h, i, j);
                                }
                }
                break;
            }
            case OpKind::Add:
                for (std::size_t i = 0; i < gout.size(); ++i) {
                    pg(0)[i] += gout[i];
                    pg(1)[i] += gout[i];
                }
                break;
            case OpKind::Softmax: {
                // Exact Jacobian-vector product (diag(p) - p p^T)^T g per row.
                const Tensor& p = rec.value;
                Tensor& gx = pg(0);
                const std::size_t last = p.shape().back();
                const std::size_t rows = p.size() / last;
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* pr = p.data() + r * last;
                    const double* gr = gout.data() + r * last;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < last; ++j) dot += gr[j] * pr[j];
                    for (std::size_t j = 0; j < last; ++j)
                        gx[r * last + j] += pr[j] * (gr[j] - dot);
                }
                break;
            }
            case OpKind::Gelu: {
                const Tensor& x = pv(0);
                Tensor& gx = pg(0);
                for (std::size_t i = 0; i < x.size(); ++i) gx[i] += gout[i] * gelu_derivative(x[i]);
                break;
            }
            case OpKind::LayerNorm: {
                // Standard three-term analytic backward.
                const Tensor& x = pv(0);
                const Tensor& gamma = pv(1);
                Tensor& gx = pg(0);
                Tensor& ggamma = pg(1);
                Tensor& gbeta = pg(2);
                const std::size_t last = x.shape().back();
                const std::size_t rows = x.size() / last;
                const double dl = static_cast<double>(last);
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* xr = x.data() + r * last;
                    const double* gr = gout.data() + r * last;
                    double mean = 0.0;
                    for (std::size_t j = 0; j < last; ++j) mean += xr[j];
                    mean /= dl;
                    double var = 0.0;
                    for (std::size_t j = 0; j < last; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                    var /= dl;
                    const double inv = 1.0 / std::sqrt(var + rec.ln_eps);
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (std::size_t j = 0; j < last; ++j) {
                        const double xhat = (xr[j] - mean) * inv;
                        const double hj = gamma[j] * gr[j];
                        mean_h += hj;
                        mean_hx += hj * xhat;
                        ggamma[j] += gr[j] * xhat;
                        gbeta[j] += gr[j];
                    }
                    mean_h /= dl;
                    mean_hx /= dl;
                    for (std::size_t j = 0; j < last; ++j) {
                        const double xhat = (xr[j] - mean) * inv;
                        gx[r * last + j] += inv * (gamma[j] * gr[j] - mean_h - xhat * mean_hx);
                    }
                }
                break;
            }
            case OpKind::Linear: {
                const Tensor& x = pv(0);
                const Tensor& w = pv(1);
                Tensor& gx = pg(0);
                Tensor& gw = pg(1);
                Tensor& gb = pg(2);
                for (std::size_t i = 0; i < x.extent(0); ++i)
                    for (std::size_t j = 0; j < w.extent(1); ++j) {
                        const double go = gout.at(i, j);
                        gb[j] += go;
                        for (std::size_t p = 0; p < x.extent(1); ++p) {
                            gx.at(i, p) += go * w.at(p, j);
                            gw.at(p, j) += x.at(i, p) * go;
                        }
                    }
                break;
            }
            case OpKind::Scale:
                for (std::size_t i = 0; i < gout.size(); ++i) pg(0)[i] += gout[i] * rec.scale_factor;
                break;
            case OpKind::Transpose: {
                const Tensor& x = pv(0);
                Tensor& gx = pg(0);
                if (x.rank() == 2) {
                    for (std::size_t i = 0; i < x.extent(0); ++i)
                        for (std::size_t j = 0; j < x.extent(1); ++j) gx.at(i, j) += gout.at(j, i);
                } else {
                    for (std::size_t h = 0; h < x.extent(0); ++h)
                        for (std::size_t i = 0; i < x.extent(1); ++i)
                            for (std::size_t j = 0; j < x.extent(2); ++j) gx.at(h, i, j) += gout.at(h, j, i);
                }
                break;
            }
            case OpKind::SplitHeads: {
                Tensor& gx = pg(0);
                const std::size_t hh = rec.value.extent(0), s = rec.value.extent(1), dh = rec.value.extent(2);
                for (std::size_t h = 0; h < hh; ++h)
                    for (std::size_t i = 0; i < s; ++i)
                        for (std::size_t j = 0; j < dh; ++j) gx.at(i, h * dh + j) += gout.at(h, i, j);
                break;
            }
            case OpKind::MergeHeads: {
                Tensor& gx = pg(0);
                const std::size_t hh = gx.extent(0), s = gx.extent(1), dh = gx.extent(2);
                for (std::size_t h = 0; h < hh; ++h)
                    for (std::size_t i = 0; i < s; ++i)
                        for (std::size_t j = 0; j < dh; ++j) gx.at(h, i, j) += gout.at(i, h * dh + j);
                break;
            }
            case OpKind::ConcatRows: {
                const Tensor& a = pv(0);
                const Tensor& b = pv(1);
                Tensor& ga = pg(0);
                Tensor& gb = pg(1);
                const std::size_t cols = a.extent(1);
                for (std::size_t i = 0; i < a.extent(0); ++i)
                    for (std::size_t j = 0; j < cols; ++j) ga.at(i, j) += gout.at(i, j);
                for (std::size_t i = 0; i < b.extent(0); ++i)
                    for (std::size_t j = 0; j < cols; ++j) gb.at(i, j) += gout.at(a.extent(0) + i, j);
                break;
            }
            case OpKind::SelectRow: {
                Tensor& gx = pg(0);
                for (std::size_t j = 0; j < gout.size(); ++j) gx.at(rec.row, j) += gout[j];
                break;
            }
        }
    }
    return g;
}

double finite_diff_check(const Tape& tape, std::size_t target_class, double h,
                         std::size_t n_coords, std::uint64_t seed) {
    Gradients grads = tape.backward(target_class);
    const int leaf = tape.input_node();
    const Tensor& analytic = grads.by_node[static_cast<std::size_t>(leaf)];
    const Tensor base = tape.value(leaf);

    Tape scratch = tape;
    Rng rng(seed);
    double max_rel = 0.0;
    for (std::size_t k = 0; k < n_coords; ++k) {
        const std::size_t c = rng.index(base.size());
        Tensor plus = base;
        plus[c] += h;
        scratch.set_leaf_value(leaf, plus);
        scratch.replay();
        const double yp = scratch.value(scratch.logits_node())[target_class];
        Tensor minus = base;
        minus[c] -= h;
        scratch.set_leaf_value(leaf, minus);
        scratch.replay();
        const double ym = scratch.value(scratch.logits_node())[target_class];
        const double numeric = (yp - ym) / (2.0 * h);
        const double rel = std::abs(analytic[c] - numeric) / std::max(std::abs(analytic[c]), 1e-8);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace attrib
