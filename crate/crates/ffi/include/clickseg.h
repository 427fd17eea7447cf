#ifndef CLICKSEG_H
#define CLICKSEG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes of every fallible call.
 */
typedef enum ClicksegStatus {
  CLICKSEG_STATUS_OK = 0,
  CLICKSEG_STATUS_NULL_POINTER = 1,
  CLICKSEG_STATUS_INVALID_INPUT = 2,
  CLICKSEG_STATUS_NO_CLICKS = 3,
  CLICKSEG_STATUS_IO = 4,
  CLICKSEG_STATUS_CHECKPOINT = 5,
  CLICKSEG_STATUS_PARSE = 6,
  CLICKSEG_STATUS_INTERNAL = 7,
} ClicksegStatus;

/*
 A loaded model.
 */
typedef struct ClicksegModel ClicksegModel;

/*
 Per-point labels produced by [`clickseg_segment`].
 */
typedef struct ClicksegResult ClicksegResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (NUL-terminated,
 truncated to `len`). Returns the full message length without the NUL, or
 0 when there is no error.

 # Safety
 `buf` must be null or point to at least `len` writable bytes.
 */
uintptr_t clickseg_last_error_message(char *buf, uintptr_t len);

/*
 Library version as a static NUL-terminated string.
 */
const char *clickseg_version(void);

/*
 Loads a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum ClicksegStatus clickseg_model_load(const char *path, struct ClicksegModel **out);

/*
 Builds a freshly initialized model from a JSON configuration; an empty
 string selects the default architecture.

 # Safety
 `config_json` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum ClicksegStatus clickseg_model_new(const char *config_json, struct ClicksegModel **out);

/*
 Number of scalar parameters, or 0 for a null handle.

 # Safety
 `model` must be null or a live handle.
 */
uintptr_t clickseg_model_num_parameters(const struct ClicksegModel *model);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void clickseg_model_free(struct ClicksegModel *model);

/*
 Segments a scene in one pass.

 `points` holds `num_points` xyz triples, `colors` is null or holds
 `num_points` rgb triples in [0, 1], `clicks` holds `num_clicks` xyz
 triples and `groups` the group id of each click.

 # Safety
 All non-null array pointers must be valid for the stated lengths;
 `out` must be a valid pointer.
 */
enum ClicksegStatus clickseg_segment(const struct ClicksegModel *model,
                                     const double *points,
                                     const double *colors,
                                     uintptr_t num_points,
                                     const double *clicks,
                                     const int64_t *groups,
                                     uintptr_t num_clicks,
                                     struct ClicksegResult **out);

/*
 Number of points labeled by the result.

 # Safety
 `result` must be null or a live handle.
 */
uintptr_t clickseg_result_num_points(const struct ClicksegResult *result);

/*
 Group id per point (`-1` = background); valid until the result is freed.

 # Safety
 `result` must be null or a live handle.
 */
const int64_t *clickseg_result_point_instance(const struct ClicksegResult *result);

/*
 Class per point (`-1` = background); valid until the result is freed.

 # Safety
 `result` must be null or a live handle.
 */
const int64_t *clickseg_result_point_class(const struct ClicksegResult *result);

/*
 Number of distinct click groups.

 # Safety
 `result` must be null or a live handle.
 */
uintptr_t clickseg_result_num_groups(const struct ClicksegResult *result);

/*
 Sorted group ids; valid until the result is freed.

 # Safety
 `result` must be null or a live handle.
 */
const int64_t *clickseg_result_groups(const struct ClicksegResult *result);

/*
 Serializes the result as JSON into a new string released with
 [`clickseg_string_free`].

 # Safety
 `result` must be a live handle; `out` must be a valid pointer.
 */
enum ClicksegStatus clickseg_result_to_json(const struct ClicksegResult *result, char **out);

/*
 Releases a result. Null is ignored.

 # Safety
 `result` must be null or a handle not yet freed.
 */
void clickseg_result_free(struct ClicksegResult *result);

/*
 Releases a string returned by this library. Null is ignored.

 # Safety
 `s` must be null or a string from this library not yet freed.
 */
void clickseg_string_free(char *s);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* CLICKSEG_H */
