/* Copyright 2026 The mcount Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/* C interface to the multi-class counting library.
 *
 * Every call returns an mcc_status. On failure, mcc_last_error() describes the
 * problem until the next call on the same thread. Strings returned through
 * char** outputs are owned by the caller and released with mcc_string_free().
 * Configuration and results cross the boundary as JSON text.
 */

#ifndef MCC_MCC_H_
#define MCC_MCC_H_

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define MCC_API __attribute__((visibility("default")))
#else
#define MCC_API
#endif

typedef enum {
  MCC_OK = 0,
  MCC_ERR_VALIDATION = 1, /* bad input, configuration or arguments */
  MCC_ERR_RUNTIME = 2,    /* I/O failure, numerical failure, internal error */
} mcc_status;

typedef struct mcc_model mcc_model;
typedef struct mcc_manifest mcc_manifest;

typedef struct {
  uint64_t backbone_calls;
  uint64_t counting_branch_calls;
  uint64_t masking_branch_calls;
} mcc_trace;

MCC_API const char* mcc_last_error(void);
MCC_API const char* mcc_version(void);
MCC_API void mcc_string_free(char* s);

/* Default configuration document for kind "train", "synth", "ingest" or "gt". */
MCC_API mcc_status mcc_default_config(const char* kind, char** json_out);

/* Manifests. */
MCC_API mcc_status mcc_manifest_read(const char* path, mcc_manifest** out);
/* Writes the manifest JSON; in-memory images go to images/ beside it. */
MCC_API mcc_status mcc_manifest_write(mcc_manifest* manifest, const char* path);
MCC_API void mcc_manifest_free(mcc_manifest* manifest);
MCC_API mcc_status mcc_manifest_size(const mcc_manifest* manifest, size_t* out);
MCC_API mcc_status mcc_manifest_num_classes(const mcc_manifest* manifest, int* out);
/* split: "train", "val", "test" or "all". */
MCC_API mcc_status mcc_manifest_subset(const mcc_manifest* manifest, const char* split, mcc_manifest** out);
MCC_API mcc_status mcc_manifest_split(mcc_manifest* manifest, double train, double val, double test, uint64_t seed);
MCC_API mcc_status mcc_manifest_json(const mcc_manifest* manifest, char** json_out);

/* Synthetic scenes from a "synth" config document. */
MCC_API mcc_status mcc_synth(const char* config_json, mcc_manifest** out);
/* Upstream conversion, resizing, class merging, splitting and patching from an
 * "ingest" config document. */
MCC_API mcc_status mcc_ingest(const char* config_json, mcc_manifest** out);
/* Writes one DMAP raster per item into out_dir and returns a JSON summary. */
MCC_API mcc_status mcc_gen_gt(const mcc_manifest* manifest, const char* gt_config_json, const char* out_dir,
                              char** summary_json);

/* Models. */
MCC_API mcc_status mcc_model_create(const char* model_config_json, uint64_t seed, mcc_model** out);
MCC_API mcc_status mcc_model_load(const char* checkpoint_path, mcc_model** out);
MCC_API mcc_status mcc_model_save(mcc_model* model, const char* checkpoint_path);
MCC_API void mcc_model_free(mcc_model* model);
MCC_API mcc_status mcc_model_config(const mcc_model* model, char** json_out);
MCC_API mcc_status mcc_model_parameter_count(const mcc_model* model, size_t* out);
/* Inference on one planar RGB image (3*height*width floats in [0,1]).
 * counts receives num_classes values. */
MCC_API mcc_status mcc_model_predict(mcc_model* model, const float* pixels, int height, int width, double* counts,
                                     size_t counts_len);
/* Runs the training-phase forward once on the image and returns the number of
 * mask-logit channels (0 when the model has no masking branch). */
MCC_API mcc_status mcc_model_mask_channels(mcc_model* model, const float* pixels, int height, int width, int* out);
MCC_API mcc_status mcc_model_trace(const mcc_model* model, mcc_trace* out);
MCC_API mcc_status mcc_model_reset_trace(mcc_model* model);

/* Trains on the train and val splits of manifest. Writes the best checkpoint
 * to checkpoint_path and the JSONL log to log_path (either may be NULL).
 * result_json (optional) receives {"best_epoch", "best_val_mae", "epochs"}. */
MCC_API mcc_status mcc_train(const char* config_json, const mcc_manifest* manifest, const char* checkpoint_path,
                             const char* log_path, char** result_json);

/* ranges: "lo:hi,lo:hi"; NULL or "" for the overall row only. */
MCC_API mcc_status mcc_evaluate(mcc_model* model, const mcc_manifest* manifest, const char* ranges,
                                char** report_json);
MCC_API mcc_status mcc_format_report(const char* report_json, char** text_out);

MCC_API mcc_status mcc_gradcheck(const char* component, uint64_t seed, double* max_rel_err, double* threshold,
                                 char** worst);

/* Writes per-class heatmaps and a composite for one item; returns a JSON list of paths. */
MCC_API mcc_status mcc_render(mcc_model* model, const mcc_manifest* manifest, size_t item, const char* out_dir,
                              char** files_json);

#ifdef __cplusplus
}
#endif

#endif /* MCC_MCC_H_ */
