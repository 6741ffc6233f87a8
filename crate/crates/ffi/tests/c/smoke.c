#include <stdio.h>
#include <string.h>
#include "wsloc.h"

int main(int argc, char **argv) {
  WslocBox a = {0, 0, 2, 2}, b = {1, 0, 3, 2};
  double v = 0;
  if (wsloc_iou(&a, &b, &v) != WSLOC_STATUS_OK || v < 0.3333 || v > 0.3334) return 1;
  if (wsloc_iou(NULL, &b, &v) != WSLOC_STATUS_NULL_POINTER) return 2;
  if (strstr(wsloc_last_error(), "null") == NULL) return 3;
  if (argc < 2) return 4;
  WslocModel *m = NULL;
  if (wsloc_model_load(argv[1], &m) != WSLOC_STATUS_OK) return 5;
  size_t classes, ch, stride;
  int32_t pre;
  if (wsloc_model_info(m, &classes, &ch, &stride, &pre) != WSLOC_STATUS_OK) return 6;
  double px[1 * 16 * 16];
  for (int i = 0; i < 256; i++) px[i] = (i % 7) / 7.0;
  WslocBox rois[2] = {{0, 0, 12, 12}, {2, 3, 15, 16}};
  double scores[64], img[8];
  if (wsloc_model_score_image(m, px, ch, 16, 16, rois, 2, scores, 64, img) != WSLOC_STATUS_OK) return 7;
  printf("%zu %.17g %.17g\n", classes, scores[0], img[0]);
  wsloc_model_free(m);
  return 0;
}
