#include "x2ct/projection.hpp"

namespace x2ct {

namespace {
void check_volume(const Tensor& y, const char* op) {
    if (y.rank() != 4 || y.dim(3) != 1)
        throw Error("E_SHAPE", std::string(op) + ": expected a (D,H,W,1) volume, got " + shape_str(y.shape()));
}
}  // namespace

Tensor project_depth(const Tensor& y) {
    check_volume(y, "project_depth");
    const std::int64_t D = y.dim(0), H = y.dim(1), W = y.dim(2);
    std::vector<double> out(static_cast<std::size_t>(H * W), 0.0);
    const double* p = y.data();
    for (std::int64_t d = 0; d < D; ++d)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w)
                out[static_cast<std::size_t>(h * W + w)] += p[(d * H + h) * W + w];
    const double inv = 1.0 / static_cast<double>(D);
    for (auto& v : out) v *= inv;
    return Tensor({H, W}, std::move(out));
}

Tensor project_width(const Tensor& y) {
    check_volume(y, "project_width");
    const std::int64_t D = y.dim(0), H = y.dim(1), W = y.dim(2);
    std::vector<double> out(static_cast<std::size_t>(D * H), 0.0);
    const double* p = y.data();
    for (std::int64_t d = 0; d < D; ++d)
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w)
                out[static_cast<std::size_t>(d * H + h)] += p[(d * H + h) * W + w];
    const double inv = 1.0 / static_cast<double>(W);
    for (auto& v : out) v *= inv;
    return Tensor({D, H}, std::move(out));
}

Tensor project_depth_adjoint(const Tensor& img, std::int64_t depth) {
    if (img.rank() != 2) throw Error("E_SHAPE", "project_depth_adjoint: expected an (H,W) image");
    const std::int64_t H = img.dim(0), W = img.dim(1);
    std::vector<double> out(static_cast<std::size_t>(depth * H * W));
    const double inv = 1.0 / static_cast<double>(depth);
    for (std::int64_t d = 0; d < depth; ++d)
        for (std::int64_t i = 0; i < H * W; ++i)
            out[static_cast<std::size_t>(d * H * W + i)] = img[i] * inv;
    return Tensor({depth, H, W, 1}, std::move(out));
}

}  // namespace x2ct
