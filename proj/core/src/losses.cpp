#include "yolomed/losses.hpp"

#include <cmath>
#include <iostream>
#include <map>

namespace yolomed {

using namespace ag;

Assignment assign_targets(const std::vector<BoundingBox>& gt_boxes,
                          const std::array<GridSpec, 3>& grids) {
    Assignment a;
    for (int i = 0; i < 3; ++i)
        a.obj_targets[static_cast<size_t>(i)]
            .assign(static_cast<size_t>(grids[static_cast<size_t>(i)].h *
                                        grids[static_cast<size_t>(i)].w), 0.0);

    // cell -> (gt index, distance to cell center), closest box wins
    std::array<std::map<long, std::pair<size_t, double>>, 3> claims;

    for (size_t g = 0; g < gt_boxes.size(); ++g) {
        const BoundingBox& box = gt_boxes[g];
        if (box.area() <= 0.0) {
            std::cerr << "warning: skipping zero-area ground-truth box\n";
            continue;
        }
        const double extent = std::sqrt(box.area());
        const int scale = extent < 64.0 ? 0 : (extent < 128.0 ? 1 : 2);
        const GridSpec& grid = grids[static_cast<size_t>(scale)];
        const double s = static_cast<double>(grid.stride);

        // Only the cell containing the box center can represent the box under
        // the decode parameterization (center = (cell + sigmoid(t)) * s), so
        // it is the sole positive; anything wider would train objectness on
        // cells whose regression can never match the target.
        const long center_x = std::clamp(static_cast<long>(box.cx() / s), 0L, grid.w - 1);
        const long center_y = std::clamp(static_cast<long>(box.cy() / s), 0L, grid.h - 1);
        const long cell = center_y * grid.w + center_x;
        const double ccx = (static_cast<double>(center_x) + 0.5) * s;
        const double ccy = (static_cast<double>(center_y) + 0.5) * s;
        const double dist = std::hypot(ccx - box.cx(), ccy - box.cy());
        auto it = claims[static_cast<size_t>(scale)].find(cell);
        if (it == claims[static_cast<size_t>(scale)].end() || dist < it->second.second)
            claims[static_cast<size_t>(scale)][cell] = {g, dist};
    }

    for (int scale = 0; scale < 3; ++scale)
        for (const auto& [cell, claim] : claims[static_cast<size_t>(scale)]) {
            PositiveCell p;
            p.scale = scale;
            p.cell = cell;
            p.gt = gt_boxes[claim.first];
            a.positives.push_back(p);
            a.obj_targets[static_cast<size_t>(scale)][static_cast<size_t>(cell)] = 1.0;
        }
    return a;
}

Var focal_loss(const Var& logits, const Tensor& targets, double alpha, double gamma) {
    if (!logits->value.same_shape(targets))
        throw std::invalid_argument("focal_loss: shape mismatch");
    Tensor alpha_t(targets.shape());
    for (long i = 0; i < targets.numel(); ++i) {
        if (targets[i] != 0.0 && targets[i] != 1.0)
            throw std::invalid_argument("focal_loss: targets must be binary");
        alpha_t[i] = targets[i] == 1.0 ? alpha : 1.0 - alpha;
    }
    Var t = constant(targets);
    Var one_minus_t = constant([&] {
        Tensor o(targets.shape());
        for (long i = 0; i < o.numel(); ++i) o[i] = 1.0 - targets[i];
        return o;
    }());
    Var p = sigmoid(logits);
    Var p_t = add(mul(p, t), mul(rsub_scalar(1.0, p), one_minus_t));
    Var modulator = pow_scalar(rsub_scalar(1.0, p_t), gamma);
    Var log_pt = log_(add_scalar(p_t, 1e-12));
    Var loss = neg(mul(constant(alpha_t), mul(modulator, log_pt)));
    return mean_all(loss);
}

Var ciou_loss(const Var& pred_xyxy, const Tensor& gt_xyxy) {
    if (pred_xyxy->value.ndim() != 2 || pred_xyxy->value.dim(1) != 4 ||
        !pred_xyxy->value.same_shape(gt_xyxy))
        throw std::invalid_argument("ciou_loss: expected matching [P,4] boxes");

    std::vector<long> valid;
    for (long r = 0; r < gt_xyxy.dim(0); ++r) {
        const double gw = gt_xyxy[r * 4 + 2] - gt_xyxy[r * 4 + 0];
        const double gh = gt_xyxy[r * 4 + 3] - gt_xyxy[r * 4 + 1];
        if (gw > 0.0 && gh > 0.0) {
            valid.push_back(r);
        } else {
            std::cerr << "warning: ciou_loss excluding degenerate ground-truth box\n";
        }
    }
    if (valid.empty()) throw std::invalid_argument("ciou_loss: no valid ground-truth boxes");

    Var pred = static_cast<long>(valid.size()) == gt_xyxy.dim(0)
                   ? pred_xyxy
                   : index_select_rows(pred_xyxy, valid);
    const long P = static_cast<long>(valid.size());
    Tensor gx1({P, 1}), gy1({P, 1}), gx2({P, 1}), gy2({P, 1}), gcx({P, 1}), gcy({P, 1}),
        gatan({P, 1}), garea({P, 1});
    for (long i = 0; i < P; ++i) {
        const long r = valid[static_cast<size_t>(i)];
        gx1[i] = gt_xyxy[r * 4 + 0];
        gy1[i] = gt_xyxy[r * 4 + 1];
        gx2[i] = gt_xyxy[r * 4 + 2];
        gy2[i] = gt_xyxy[r * 4 + 3];
        gcx[i] = 0.5 * (gx1[i] + gx2[i]);
        gcy[i] = 0.5 * (gy1[i] + gy2[i]);
        gatan[i] = std::atan((gx2[i] - gx1[i]) / (gy2[i] - gy1[i]));
        garea[i] = (gx2[i] - gx1[i]) * (gy2[i] - gy1[i]);
    }

    Var px1 = slice(pred, 1, 0, 1), py1 = slice(pred, 1, 1, 1);
    Var px2 = slice(pred, 1, 2, 1), py2 = slice(pred, 1, 3, 1);
    Var pw = sub(px2, px1), ph = sub(py2, py1);
    Var parea = mul(pw, ph);

    Var iw = relu(sub(minimum(px2, constant(gx2)), maximum(px1, constant(gx1))));
    Var ih = relu(sub(minimum(py2, constant(gy2)), maximum(py1, constant(gy1))));
    Var inter = mul(iw, ih);
    Var uni = sub(add(parea, constant(garea)), inter);
    Var iou = div(inter, add_scalar(uni, 1e-12));

    Var pcx = mul_scalar(add(px1, px2), 0.5), pcy = mul_scalar(add(py1, py2), 0.5);
    Var rho2 = add(square(sub(pcx, constant(gcx))), square(sub(pcy, constant(gcy))));

    Var cw = sub(maximum(px2, constant(gx2)), minimum(px1, constant(gx1)));
    Var ch = sub(maximum(py2, constant(gy2)), minimum(py1, constant(gy1)));
    Var c2 = add_scalar(add(square(cw), square(ch)), 1e-12);

    constexpr double k4OverPi2 = 4.0 / (M_PI * M_PI);
    Var v = mul_scalar(square(sub(constant(gatan), atan_(div(pw, add_scalar(ph, 1e-12))))),
                       k4OverPi2);
    Var trade = div(v, add_scalar(add(rsub_scalar(1.0, iou), v), 1e-12));

    Var ciou = sub(sub(iou, div(rho2, c2)), mul(trade, v));
    return mean_all(rsub_scalar(1.0, ciou));
}

Var seg_ce_loss(const Var& seg_logits, const std::vector<const SegmentationMask*>& masks) {
    const long N = seg_logits->value.dim(0), K = seg_logits->value.dim(1);
    const long H = seg_logits->value.dim(2), W = seg_logits->value.dim(3);
    if (static_cast<long>(masks.size()) != N)
        throw std::invalid_argument("seg_ce_loss: mask count mismatch");
    for (const auto* m : masks) {
        if (m->height != H || m->width != W)
            throw std::invalid_argument("seg_ce_loss: mask dims differ from logits");
        for (uint8_t v : m->data)
            if (v >= K) throw std::out_of_range("seg_ce_loss: class id out of range");
    }
    if (K == 2) {
        Var d = sub(slice(seg_logits, 1, 1, 1), slice(seg_logits, 1, 0, 1));  // [N,1,H,W]
        Tensor t({N, 1, H, W});
        for (long n = 0; n < N; ++n)
            for (long i = 0; i < H * W; ++i)
                t[n * H * W + i] = masks[static_cast<size_t>(n)]->data[static_cast<size_t>(i)];
        // BCE with logits: softplus(d) - t*d
        return mean_all(sub(softplus(d), mul(constant(t), d)));
    }
    Var rows = reshape(nchw_to_tokens(seg_logits), {N * H * W, K});
    std::vector<long> labels(static_cast<size_t>(N * H * W));
    for (long n = 0; n < N; ++n)
        for (long i = 0; i < H * W; ++i)
            labels[static_cast<size_t>(n * H * W + i)] =
                masks[static_cast<size_t>(n)]->data[static_cast<size_t>(i)];
    return cross_entropy_rows(rows, labels);
}

GlobalLoss global_loss(const ModelOutputs& out, const std::vector<Assignment>& assignments,
                       const std::vector<const SegmentationMask*>& masks,
                       const ModelConfig& cfg) {
    const long N = out.seg_logits->value.dim(0);
    if (static_cast<long>(assignments.size()) != N)
        throw std::invalid_argument("global_loss: assignment count mismatch");

    std::vector<Var> cls_rows_parts, obj_rows_parts, box_cols[4];
    std::vector<double> cls_targets_flat, obj_targets_flat;
    std::vector<double> cell_x, cell_y, stride_col;
    std::vector<double> gt_flat;
    long total_pos = 0;

    for (int i = 0; i < 3; ++i) {
        const ScalePrediction& p = out.det[static_cast<size_t>(i)];
        const long C = p.cls->value.dim(1), h = p.cls->value.dim(2), w = p.cls->value.dim(3);
        const long hw = h * w;
        Var cls_rows = reshape(nchw_to_tokens(p.cls), {N * hw, C});
        Var obj_rows = reshape(nchw_to_tokens(p.obj), {N * hw, 1});
        Var box_rows = reshape(nchw_to_tokens(p.box), {N * hw, 4});

        std::vector<long> pos_rows;
        for (long n = 0; n < N; ++n) {
            const Assignment& a = assignments[static_cast<size_t>(n)];
            if (static_cast<long>(a.obj_targets[static_cast<size_t>(i)].size()) != hw)
                throw std::invalid_argument("global_loss: assignment grid mismatch");
            for (double t : a.obj_targets[static_cast<size_t>(i)]) obj_targets_flat.push_back(t);
            for (const PositiveCell& pc : a.positives) {
                if (pc.scale != i) continue;
                pos_rows.push_back(n * hw + pc.cell);
                for (long c = 0; c < C; ++c)
                    cls_targets_flat.push_back(c == pc.gt.class_id ? 1.0 : 0.0);
                cell_x.push_back(static_cast<double>(pc.cell % w));
                cell_y.push_back(static_cast<double>(pc.cell / w));
                stride_col.push_back(static_cast<double>(cfg.strides[static_cast<size_t>(i)]));
                gt_flat.insert(gt_flat.end(),
                               {pc.gt.x_min, pc.gt.y_min, pc.gt.x_max, pc.gt.y_max});
            }
        }
        obj_rows_parts.push_back(obj_rows);
        if (!pos_rows.empty()) {
            total_pos += static_cast<long>(pos_rows.size());
            cls_rows_parts.push_back(index_select_rows(cls_rows, pos_rows));
            Var pos_box = index_select_rows(box_rows, pos_rows);
            for (int c = 0; c < 4; ++c)
                box_cols[c].push_back(slice(pos_box, 1, c, 1));
        }
    }

    GlobalLoss result;
    Var l_class, l_box;
    if (total_pos > 0) {
        const long C = out.det[0].cls->value.dim(1);
        Var cls_all = concat(cls_rows_parts, 0);
        l_class = focal_loss(cls_all, Tensor({total_pos, C}, std::move(cls_targets_flat)),
                             cfg.focal_alpha, cfg.focal_gamma);

        // decode positive-cell boxes so CIoU sees pixel geometry
        Var tx = concat(box_cols[0], 0), ty = concat(box_cols[1], 0);
        Var tw = concat(box_cols[2], 0), th = concat(box_cols[3], 0);
        Var s = constant(Tensor({total_pos, 1}, std::move(stride_col)));
        Var bx = mul(add(constant(Tensor({total_pos, 1}, std::move(cell_x))), sigmoid(tx)), s);
        Var by = mul(add(constant(Tensor({total_pos, 1}, std::move(cell_y))), sigmoid(ty)), s);
        Var half_w = mul_scalar(mul(exp_(tw), s), 0.5);
        Var half_h = mul_scalar(mul(exp_(th), s), 0.5);
        Var pred = concat({sub(bx, half_w), sub(by, half_h), add(bx, half_w), add(by, half_h)}, 1);
        l_box = ciou_loss(pred, Tensor({total_pos, 4}, std::move(gt_flat)));
    } else {
        l_class = constant(Tensor::scalar(0.0));
        l_box = constant(Tensor::scalar(0.0));
    }

    Var obj_all = concat(obj_rows_parts, 0);
    // Objectness focal loss is normalized by the positive count, not the cell
    // count, so the handful of positive cells is not diluted by the grid size.
    const double obj_norm =
        static_cast<double>(obj_all->value.dim(0)) / static_cast<double>(std::max(1L, total_pos));
    Var l_obj = mul_scalar(
        focal_loss(obj_all, Tensor({obj_all->value.dim(0), 1}, std::move(obj_targets_flat)),
                   cfg.focal_alpha, cfg.focal_gamma),
        obj_norm);
    Var l_ce = seg_ce_loss(out.seg_logits, masks);

    Var det = add(add(mul_scalar(l_class, cfg.alpha1), mul_scalar(l_obj, cfg.alpha2)),
                  mul_scalar(l_box, cfg.alpha3));
    Var total = add(mul_scalar(det, cfg.beta1), mul_scalar(l_ce, cfg.beta2));

    result.value = total;
    result.parts = {l_class->value[0], l_obj->value[0], l_box->value[0], l_ce->value[0],
                    total->value[0]};
    return result;
}

}  // namespace yolomed
