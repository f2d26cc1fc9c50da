/* advcheck: local-gradient detection of adversarial and misclassified inputs. */
#ifndef ADVCHECK_ADVCHECK_H
#define ADVCHECK_ADVCHECK_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define ADVCHECK_API __declspec(dllexport)
#else
#define ADVCHECK_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum advcheck_status {
  ADVCHECK_OK = 0,
  ADVCHECK_INVALID_ARGUMENT = 1,
  ADVCHECK_SHAPE_MISMATCH = 2,
  ADVCHECK_NUMERIC = 3,
  ADVCHECK_FORMAT = 4,
  ADVCHECK_IO = 5,
  ADVCHECK_TRAINING = 6,
  ADVCHECK_DATA = 7,
  ADVCHECK_QUOTA = 8,
  ADVCHECK_COMPATIBILITY = 9,
  ADVCHECK_STRUCTURE = 10,
  ADVCHECK_INTERNAL = 99
} advcheck_status;

typedef enum advcheck_verdict { ADVCHECK_BENIGN = 0, ADVCHECK_MISCLASSIFIED = 1 } advcheck_verdict;

typedef struct advcheck_network advcheck_network;
typedef struct advcheck_dataset advcheck_dataset;
typedef struct advcheck_detector advcheck_detector;

/* Progress lines from long-running calls. The callback may be invoked from the calling thread only. */
typedef void (*advcheck_log_fn)(const char* line, void* user);

ADVCHECK_API const char* advcheck_version(void);
ADVCHECK_API const char* advcheck_status_name(advcheck_status status);
/* Message of the last failed call on this thread; empty after a success. */
ADVCHECK_API const char* advcheck_last_error(void);
ADVCHECK_API void advcheck_set_log_callback(advcheck_log_fn fn, void* user);
/* Frees strings returned through char** out-parameters. */
ADVCHECK_API void advcheck_string_free(char* s);

ADVCHECK_API advcheck_status advcheck_sha256_file(const char* path, char** out_hex);

/* Networks */
ADVCHECK_API advcheck_status advcheck_network_load(const char* path, advcheck_network** out);
ADVCHECK_API advcheck_status advcheck_network_save(const advcheck_network* net, const char* path);
ADVCHECK_API void advcheck_network_free(advcheck_network* net);
ADVCHECK_API advcheck_status advcheck_network_input_size(const advcheck_network* net, size_t* out);
ADVCHECK_API advcheck_status advcheck_network_class_count(const advcheck_network* net, size_t* out);
ADVCHECK_API advcheck_status advcheck_network_layer_count(const advcheck_network* net, size_t* out);
ADVCHECK_API advcheck_status advcheck_network_layer_size(const advcheck_network* net, size_t layer, size_t* out);
ADVCHECK_API advcheck_status advcheck_network_fingerprint(const advcheck_network* net, char** out_hex);
/* logits may be NULL; otherwise logits_len must equal the class count. */
ADVCHECK_API advcheck_status advcheck_network_predict(const advcheck_network* net, const float* x, size_t len,
                                                      size_t* out_class, float* logits, size_t logits_len);
/* Derivative of the predicted class's softmax probability (gradient_target "probability") or logit
   ("logit") with respect to the output of `layer`. out_len must equal advcheck_network_layer_size. */
ADVCHECK_API advcheck_status advcheck_network_local_gradient(const advcheck_network* net, const float* x,
                                                             size_t len, size_t layer,
                                                             const char* gradient_target, float* out,
                                                             size_t out_len);

/* Datasets */
ADVCHECK_API advcheck_status advcheck_dataset_load_idx(const char* images_path, const char* labels_path,
                                                       size_t class_count, advcheck_dataset** out);
/* Unlabeled IDX3 images; every label reads as 0. */
ADVCHECK_API advcheck_status advcheck_dataset_load_images(const char* images_path, advcheck_dataset** out);
/* kind: "gaussian_blobs" or "striped_patterns". */
ADVCHECK_API advcheck_status advcheck_dataset_synth(const char* kind, size_t n, size_t classes, size_t image_side,
                                                    uint64_t seed, advcheck_dataset** out);
ADVCHECK_API advcheck_status advcheck_dataset_save_idx(const advcheck_dataset* ds, const char* images_path,
                                                       const char* labels_path);
ADVCHECK_API void advcheck_dataset_free(advcheck_dataset* ds);
ADVCHECK_API advcheck_status advcheck_dataset_size(const advcheck_dataset* ds, size_t* out);
ADVCHECK_API advcheck_status advcheck_dataset_image_size(const advcheck_dataset* ds, size_t* out);
/* out_label may be NULL. */
ADVCHECK_API advcheck_status advcheck_dataset_image(const advcheck_dataset* ds, size_t index, float* out,
                                                    size_t len, size_t* out_label);

/* Detectors */
ADVCHECK_API advcheck_status advcheck_detector_load(const char* path, advcheck_detector** out);
ADVCHECK_API advcheck_status advcheck_detector_save(const advcheck_detector* det, const char* path);
ADVCHECK_API void advcheck_detector_free(advcheck_detector* det);
ADVCHECK_API advcheck_status advcheck_detector_layer(const advcheck_detector* det, size_t* out);
ADVCHECK_API advcheck_status advcheck_detect(const advcheck_network* net, const advcheck_detector* det,
                                             const float* x, size_t len, advcheck_verdict* out_verdict,
                                             float* out_score);

/* Pipeline. `config_json` is an experiment configuration document. Where a network argument is
   accepted, NULL means "load or train the model the configuration describes". Summaries and reports
   are JSON strings owned by the caller. */
ADVCHECK_API advcheck_status advcheck_train_model(const char* config_json, advcheck_network** out,
                                                  char** out_summary);
ADVCHECK_API advcheck_status advcheck_generate_adversarial(const char* config_json, const advcheck_network* net,
                                                           size_t attack_index, advcheck_dataset** out,
                                                           char** out_summary);
ADVCHECK_API advcheck_status advcheck_train_detector(const char* config_json, const advcheck_network* net,
                                                     advcheck_detector** out, char** out_summary);
/* The report is produced even when a stage fails; the status then carries that stage's error. */
ADVCHECK_API advcheck_status advcheck_run_experiment(const char* config_json, char** out_report,
                                                     char** out_distributions_csv);
/* which: "layers", "sources" or "all". */
ADVCHECK_API advcheck_status advcheck_sweep(const char* config_json, const char* which, char** out_json);
ADVCHECK_API advcheck_status advcheck_export_distributions(const char* config_json, char** out_csv);

#ifdef __cplusplus
}
#endif

#endif
