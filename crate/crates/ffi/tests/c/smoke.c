#include <math.h>
#include <stdio.h>
#include "glim.h"

int main(void) {
    const double sigma[4] = {1.0, 0.0, 0.0, 1.0};
    GlimModel *m = NULL;
    if (glim_model_new(sigma, 2, 0.5, 1e-9, &m) != GLIM_STATUS_OK) {
        fprintf(stderr, "new: %s\n", glim_last_error());
        return 1;
    }
    const double path[3] = {0.5, 0.5, 1.0};
    double lp = 0.0;
    if (glim_model_log_density(m, path, 3, &lp) != GLIM_STATUS_OK || fabs(lp - log(0.5)) > 1e-12) {
        fprintf(stderr, "log_density: %g\n", lp);
        return 1;
    }
    double y[3];
    double z;
    if (glim_model_sample(m, 42, y, 3) != GLIM_STATUS_OK || glim_model_recover_latents(m, &y[1], 1, &z) != GLIM_STATUS_OK) {
        fprintf(stderr, "sample: %s\n", glim_last_error());
        return 1;
    }
    if (glim_model_sample(m, 42, NULL, 3) != GLIM_STATUS_NULL_POINTER || glim_last_error() == NULL) {
        return 1;
    }
    glim_model_free(m);
    printf("ok %.6f\n", lp);
    return 0;
}
