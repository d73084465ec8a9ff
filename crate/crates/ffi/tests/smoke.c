#include "molfusion.h"
#include <stdio.h>
#include <string.h>

#define CHECK(cond) do { if (!(cond)) { fprintf(stderr, "line %d: %s\n", __LINE__, #cond); return 1; } } while (0)

int main(void) {
    MfGraph *a = NULL, *b = NULL, *bad = NULL;
    CHECK(mf_graph_parse("CCO", &a) == MF_STATUS_OK);
    CHECK(mf_graph_parse("OCC", &b) == MF_STATUS_OK);
    CHECK(mf_graph_parse("C1CC", &bad) == MF_STATUS_PARSE_ERROR);
    CHECK(bad == NULL);
    char msg[256];
    CHECK(mf_last_error_length() > 1);
    CHECK(mf_last_error_message(msg, sizeof msg) == MF_STATUS_OK);
    CHECK(strstr(msg, "C1CC") != NULL);

    size_t atoms = 0, bonds = 0;
    CHECK(mf_graph_size(a, &atoms, &bonds) == MF_STATUS_OK);
    CHECK(atoms == 3 && bonds == 2);

    MfFingerprint *fa = NULL, *fb = NULL;
    CHECK(mf_fingerprint_new(a, 2, 2048, &fa) == MF_STATUS_OK);
    CHECK(mf_fingerprint_new(b, 2, 2048, &fb) == MF_STATUS_OK);
    double sim = 0.0;
    CHECK(mf_tanimoto(fa, fb, &sim) == MF_STATUS_OK);
    CHECK(sim == 1.0);

    MfGraph *ring = NULL;
    CHECK(mf_graph_parse("c1ccccc1CC", &ring) == MF_STATUS_OK);
    size_t need = 0;
    char tiny[2];
    CHECK(mf_graph_scaffold(ring, tiny, sizeof tiny, &need) == MF_STATUS_BUFFER_TOO_SMALL);
    CHECK(need > sizeof tiny);
    char scaffold[512];
    CHECK(need <= sizeof scaffold);
    CHECK(mf_graph_scaffold(ring, scaffold, sizeof scaffold, &need) == MF_STATUS_OK);
    CHECK(strlen(scaffold) + 1 == need);

    CHECK(mf_graph_size(NULL, &atoms, &bonds) == MF_STATUS_NULL_POINTER);
    printf("version %s scaffold %s\n", mf_version(), scaffold);

    mf_fingerprint_free(fa);
    mf_fingerprint_free(fb);
    mf_graph_free(a);
    mf_graph_free(b);
    mf_graph_free(ring);
    mf_graph_free(NULL);
    return 0;
}
