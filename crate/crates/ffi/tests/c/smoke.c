#include <stdio.h>
#include <string.h>
#include "esc_nmt.h"

int main(int argc, char **argv) {
    if (argc != 3) return 2;
    EscModel *model = NULL;
    EscVocab *vocab = NULL;
    if (esc_model_load(argv[1], &model) != ESC_STATUS_OK) return 3;
    if (esc_vocab_load(argv[2], NULL, &vocab) != ESC_STATUS_OK) return 4;

    size_t params = 0;
    esc_model_param_count(model, &params);

    EscDecodeOptions opts = esc_decode_options_default();
    opts.gamma = 0.5;
    char *out = NULL;
    if (esc_compress(model, vocab, "k1 f2 k3 k4 f0 k5", &opts, &out) != ESC_STATUS_OK) return 5;
    printf("params=%zu\ncompressed=%s\n", params, out);
    esc_string_free(out);

    double score = 0.0;
    esc_bleu("a b c d\n", "a b c d\n", 0, &score);
    printf("bleu=%.2f\n", score);

    if (esc_model_load("/nonexistent/model.ckpt", &model) != ESC_STATUS_IO) return 6;
    printf("error=%s\n", esc_last_error_message());

    esc_model_free(model);
    esc_vocab_free(vocab);
    return 0;
}
