#ifndef DIVGNN_H
#define DIVGNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DgStatus {
  DG_STATUS_OK = 0,
  DG_STATUS_NULL_POINTER = 1,
  DG_STATUS_INVALID_ARGUMENT = 2,
  DG_STATUS_BUFFER_TOO_SMALL = 3,
  DG_STATUS_IO = 4,
  DG_STATUS_FORMAT = 5,
  DG_STATUS_SOLVER = 6,
  DG_STATUS_MESH = 7,
  DG_STATUS_MODEL = 8,
  DG_STATUS_PANIC = 9,
} DgStatus;

/**
 * Opaque triangulated plate.
 */
typedef struct DgMesh DgMesh;

/**
 * Opaque trained model with its feature statistics.
 */
typedef struct DgModel DgModel;

/**
 * Geometry of one periodic hole plate.
 */
typedef struct DgHolePlateSpec {
  double plate_side;
  double hole_center_x;
  double hole_center_y;
  /**
   * Zero for a plate without hole.
   */
  double hole_radius;
  double global_elem_size;
  double hole_elem_size;
  uint64_t seed;
} DgHolePlateSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *dg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dg_version(void);

/**
 * Meshes a periodic hole plate into `*out`.
 *
 * # Safety
 * `spec` must point to a valid spec and `out` to writable storage.
 */
enum DgStatus dg_mesh_generate(const struct DgHolePlateSpec *spec, struct DgMesh **out);

/**
 * # Safety
 * `mesh` must be null or a handle from [`dg_mesh_generate`] not yet freed.
 */
void dg_mesh_free(struct DgMesh *mesh);

/**
 * Node count, or 0 for a null handle.
 *
 * # Safety
 * `mesh` must be null or a live handle.
 */
size_t dg_mesh_node_count(const struct DgMesh *mesh);

/**
 * Triangle count, or 0 for a null handle.
 *
 * # Safety
 * `mesh` must be null or a live handle.
 */
size_t dg_mesh_element_count(const struct DgMesh *mesh);

/**
 * Copies node coordinates as interleaved `x, y` pairs (`2 n` values).
 *
 * # Safety
 * `out` must hold `len` writable doubles.
 */
enum DgStatus dg_mesh_coords(const struct DgMesh *mesh, double *out, size_t len);

/**
 * Copies triangle connectivity (`3 m` node indices, counter-clockwise).
 *
 * # Safety
 * `out` must hold `len` writable values.
 */
enum DgStatus dg_mesh_triangles(const struct DgMesh *mesh, size_t *out, size_t len);

/**
 * Solves the periodic plane-stress problem for mean strain
 * `(eps_xx, eps_yy, eps_xy)` (tensor shear). Writes nodal stresses as
 * `n x 3` row-major `(xx, yy, xy)` and, if non-null, the mean stress.
 *
 * # Safety
 * `eps` must hold 3 doubles, `nodal_stress` `len` writable doubles and
 * `mean_stress` null or 3 writable doubles.
 */
enum DgStatus dg_fe_solve(const struct DgMesh *mesh,
                          double youngs_modulus,
                          double poisson_ratio,
                          const double *eps,
                          double *nodal_stress,
                          size_t len,
                          double *mean_stress);

/**
 * Nodal divergence `n x 2` of an `n x 3` stress field; rows of nodes on
 * the outer or hole boundary are zero.
 *
 * # Safety
 * `stress` must hold `stress_len` doubles and `out` `out_len` writable ones.
 */
enum DgStatus dg_divergence(const struct DgMesh *mesh,
                            const double *stress,
                            size_t stress_len,
                            double *out,
                            size_t out_len);

/**
 * Loads a checkpoint written by the `divgnn` tool.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` writable.
 */
enum DgStatus dg_model_load(const char *path, struct DgModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`dg_model_load`] not yet freed.
 */
void dg_model_free(struct DgModel *model);

/**
 * Trainable scalar count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dg_model_param_count(const struct DgModel *model);

/**
 * Whether the model was trained with periodic edges (1) or not (0).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
int32_t dg_model_periodic_edges(const struct DgModel *model);

/**
 * Predicts the `n x 3` nodal stress field (MPa) of `mesh` under the given
 * mean stress `(xx, yy, xy)`.
 *
 * # Safety
 * `mean_stress` must hold 3 doubles and `out` `len` writable doubles.
 */
enum DgStatus dg_model_predict(const struct DgModel *model,
                               const struct DgMesh *mesh,
                               const double *mean_stress,
                               double *out,
                               size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIVGNN_H */
