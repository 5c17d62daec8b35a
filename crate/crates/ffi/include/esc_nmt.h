#ifndef ESC_NMT_H
#define ESC_NMT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define ESC_ROUGE_1 1

#define ESC_ROUGE_2 2

#define ESC_ROUGE_L 3

typedef enum EscStatus {
  ESC_STATUS_OK = 0,
  ESC_STATUS_NULL_POINTER = 1,
  ESC_STATUS_INVALID_UTF8 = 2,
  ESC_STATUS_IO = 3,
  ESC_STATUS_INVALID_ARGUMENT = 4,
  ESC_STATUS_MODEL = 5,
  ESC_STATUS_PANIC = 6,
} EscStatus;

// A loaded checkpoint.
typedef struct EscModel EscModel;

// A loaded vocabulary.
typedef struct EscVocab EscVocab;

// Beam settings for [`esc_compress`] and [`esc_translate`].
typedef struct EscDecodeOptions {
  double alpha;
  double beta;
  // Length ratio; ignored by translation.
  double gamma;
  size_t beam;
  // Translation length limit beyond the source length.
  size_t max_extra_tokens;
} EscDecodeOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library defaults: α 0.5, β 0.2, γ 0.6, beam 5, 10 extra tokens.
struct EscDecodeOptions esc_decode_options_default(void);

// Message of the last failed call on this thread, or an empty string. Valid
// until the next call into the library on the same thread.
const char *esc_last_error_message(void);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum EscStatus esc_model_load(const char *path, struct EscModel **out);

// # Safety
// `model` must come from [`esc_model_load`] and not be used afterwards.
void esc_model_free(struct EscModel *model);

// # Safety
// `model` must be a live handle; `out` must be writable.
enum EscStatus esc_model_param_count(const struct EscModel *model, size_t *out);

// Loads `vocab_path`, plus BPE merges when `merges_path` is non-null.
//
// # Safety
// Paths must be NUL-terminated strings (`merges_path` may be null); `out`
// must be writable.
enum EscStatus esc_vocab_load(const char *vocab_path,
                              const char *merges_path,
                              struct EscVocab **out);

// # Safety
// `vocab` must come from [`esc_vocab_load`] and not be used afterwards.
void esc_vocab_free(struct EscVocab *vocab);

// Compresses one sentence.
//
// # Safety
// Handles must be live, `sentence` NUL-terminated, `options` readable and
// `out` writable.
enum EscStatus esc_compress(const struct EscModel *model,
                            const struct EscVocab *vocab,
                            const char *sentence,
                            const struct EscDecodeOptions *options,
                            char **out);

// Translates one sentence; `compressed` may be null for the baseline.
//
// # Safety
// As for [`esc_compress`]; `compressed` may be null.
enum EscStatus esc_translate(const struct EscModel *model,
                             const struct EscVocab *vocab,
                             const char *sentence,
                             const char *compressed,
                             const struct EscDecodeOptions *options,
                             char **out);

// Corpus BLEU-4 (0..100) of newline-separated hypotheses against
// newline-separated references.
//
// # Safety
// Strings must be NUL-terminated; `out` must be writable.
enum EscStatus esc_bleu(const char *hypotheses, const char *references, int smooth, double *out);

// Sentence ROUGE F1; `variant` is one of `ESC_ROUGE_1`, `ESC_ROUGE_2`,
// `ESC_ROUGE_L`.
//
// # Safety
// Strings must be NUL-terminated; `out` must be writable.
enum EscStatus esc_rouge(const char *candidate,
                         const char *reference,
                         uint32_t variant,
                         double *out);

// # Safety
// `s` must come from this library and not be used afterwards.
void esc_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ESC_NMT_H */
