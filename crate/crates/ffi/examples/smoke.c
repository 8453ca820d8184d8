#include <stdio.h>
#include "nextshot.h"

int main(void) {
    uint8_t m[25];
    if (ns_ham_block_matrix(m) != NS_STATUS_OK) return 1;
    for (int q = 0; q < 5; q++) {
        for (int k = 0; k < 5; k++) printf("%d ", m[q * 5 + k]);
        printf("\n");
    }
    NsModel *model = NULL;
    NsPair *pair = NULL;
    size_t size = 0;
    if (ns_model_new(NS_PRESET_TINY, 1, &model) != NS_STATUS_OK) return 1;
    ns_model_image_size(model, &size);
    if (ns_pair_new(4, 1, size, &pair) != NS_STATUS_OK) return 1;
    float img[16 * 16 * 3];
    NsStatus s = ns_sample_next_shot(model, pair, 8, NS_CONDITIONING_CACI, 2, img, sizeof img / sizeof img[0]);
    printf("sample status %d, first pixel %.4f\n", (int)s, img[0]);
    if (ns_pair_new(4, 9, size, NULL) != NS_STATUS_OK) {
        char msg[128];
        ns_last_error_message(msg, sizeof msg);
        printf("expected error: %s\n", msg);
    }
    ns_pair_free(pair);
    ns_model_free(model);
    printf("version %s\n", ns_version());
    return s == NS_STATUS_OK ? 0 : 1;
}
