#include "crayonbox/crayon.hpp"

#include <cmath>

#include "crayonbox/errors.hpp"

namespace crayonbox {

CrayonCodebooks CrayonCodebooks::init(int d, Rng& rng, float std_dev) {
    CrayonCodebooks cb;
    cb.semantic = Tensor::randn({ClassVocabulary::kNumClasses, d}, rng, std_dev, true);
    cb.numbering = Tensor::randn({21, d}, rng, std_dev, true);
    return cb;
}

Connector Connector::init(int d, int hidden, int d_model, Rng& rng) {
    Connector c;
    c.w1 = Tensor::randn({hidden, d}, rng, std::sqrt(2.0f / static_cast<float>(d)), true);
    c.b1 = Tensor::zeros({hidden}, true);
    c.w2 = Tensor::zeros({d_model, hidden}, true);
    c.b2 = Tensor::zeros({d_model}, true);
    return c;
}

Tensor build_prompt(const PanopticGrid& grid, const CrayonCodebooks& cb, CrayonFlags flags) {
    const size_t cells = static_cast<size_t>(grid.h) * grid.w;
    std::vector<int> class_ids(cells), numbers(cells);
    for (size_t i = 0; i < cells; ++i) {
        class_ids[i] = grid.class_id[i];
        numbers[i] = grid.number[i];
        if (class_ids[i] >= cb.semantic.dim(0)) throw ArgumentError("class id outside semantic table");
        if (numbers[i] >= cb.numbering.dim(0)) throw ArgumentError("number outside numbering table");
    }
    if (!flags.sem_query && !flags.num_query)
        return Tensor::zeros({static_cast<int>(cells), cb.width()});
    if (!flags.num_query) return embedding_rows(cb.semantic, class_ids);
    if (!flags.sem_query) return embedding_rows(cb.numbering, numbers);
    return add(embedding_rows(cb.semantic, class_ids), embedding_rows(cb.numbering, numbers));
}

Tensor connect(const Tensor& prompt, const Connector& conn) {
    if (prompt.shape().size() != 2 || prompt.dim(1) != conn.in_width())
        throw ShapeError("connect: prompt width does not match connector input");
    Tensor h = gelu(add_row_bias(matmul_nt(prompt, conn.w1), conn.b1));
    return add_row_bias(matmul_nt(h, conn.w2), conn.b2);
}

Tensor inject(const Tensor& image_tokens, const Tensor& connected) {
    if (image_tokens.shape() != connected.shape())
        throw ShapeError("inject: image token / prompt shape mismatch");
    return add(image_tokens, connected);
}

}  // namespace crayonbox
