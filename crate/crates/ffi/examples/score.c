/* Load an archive and score one image file: score <model.axr> <image> */
#include <stdio.h>
#include "adverx.h"

int main(int argc, char **argv) {
    if (argc != 3) {
        fprintf(stderr, "usage: %s <model.axr> <image>\n", argv[0]);
        return 2;
    }
    AdverxModel *model = NULL;
    if (adverx_model_load(argv[1], &model) != ADVERX_STATUS_OK) {
        fprintf(stderr, "load: %s\n", adverx_last_error());
        return 1;
    }
    double score = 0.0;
    AdverxStatus st = adverx_score_file(model, argv[2], 64, 0.2, 0, &score);
    if (st != ADVERX_STATUS_OK) {
        fprintf(stderr, "score: %s\n", adverx_last_error());
        adverx_model_free(model);
        return 1;
    }
    printf("%.17g\n", score);
    adverx_model_free(model);
    return 0;
}
