#include <stdio.h>
#include <string.h>

#include "tcna.h"

int main(void) {
    size_t dilations[4] = {1, 2, 3, 4};
    size_t classes[3] = {2513, 125, 352};
    uint64_t seq = 0, heads = 0;
    if (tcna_required_input_length(3, dilations, 4) != 21) return 1;
    if (tcna_tcn_macs(1024, 1024, 3, dilations, 4, classes, 21, &seq, &heads) != TCNA_STATUS_OK) return 2;
    if (seq != 160432128ull) return 3;
    TcnaBranch *branch = NULL;
    TcnaStatus s = tcna_branch_load("/nonexistent.ckpt", &branch);
    if (s != TCNA_STATUS_IO || branch != NULL) return 4;
    if (strstr(tcna_last_error_message(), "nonexistent.ckpt") == NULL) return 5;
    if (tcna_branch_info(NULL, NULL) != TCNA_STATUS_NULL_POINTER) return 6;
    tcna_branch_free(NULL);
    printf("%s\n", tcna_status_name(TCNA_STATUS_FORMAT));
    return 0;
}
